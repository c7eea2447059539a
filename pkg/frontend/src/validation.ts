/** Client-side mirror of the code schema: the UI never submits a code
 * the service would reject. */

import type { CodeDoc, DictionaryInfo } from './types.js';

export interface CodeProblem {
  channel: number | null;
  problem: string;
}

export function validateCode(code: CodeDoc, dict: DictionaryInfo): CodeProblem[] {
  const problems: CodeProblem[] = [];
  const nChannels = dict.M + 1;
  if (!Array.isArray(code.pairs) || !Array.isArray(code.present)) {
    return [{ channel: null, problem: "code needs 'pairs' and 'present' lists" }];
  }
  if (code.pairs.length !== nChannels || code.present.length !== nChannels) {
    return [
      {
        channel: null,
        problem: `expected ${nChannels} channels, got ${code.pairs.length} pairs / ${code.present.length} flags`,
      },
    ];
  }
  code.pairs.forEach((pair, i) => {
    if (!Array.isArray(pair) || pair.length !== 2) {
      problems.push({ channel: i, problem: 'pair must be [channel, split]' });
      return;
    }
    const [m, k] = pair;
    if (m !== i) {
      problems.push({ channel: i, problem: `pair channel ${m} out of order` });
    }
    if (code.present[i] && !(Number.isInteger(k) && k >= 1 && k <= dict.K)) {
      problems.push({ channel: i, problem: `split ${k} outside 1..${dict.K}` });
    }
  });
  if (!code.present.some(Boolean)) {
    problems.push({ channel: null, problem: 'no present channels' });
  }
  return problems;
}

export function assertValidCode(code: CodeDoc, dict: DictionaryInfo): void {
  const problems = validateCode(code, dict);
  if (problems.length) {
    const summary = problems
      .map((p) => (p.channel === null ? p.problem : `channel ${p.channel}: ${p.problem}`))
      .join('; ');
    throw new InvalidCodeError(summary, problems);
  }
}

export class InvalidCodeError extends Error {
  problems: CodeProblem[];

  constructor(message: string, problems: CodeProblem[]) {
    super(message);
    this.name = 'InvalidCodeError';
    this.problems = problems;
  }
}

export function codeToPromptString(code: CodeDoc): string {
  return code.pairs
    .filter((_, i) => code.present[i])
    .map(([m, k]) => `(${m},${k})`)
    .join(' ');
}
