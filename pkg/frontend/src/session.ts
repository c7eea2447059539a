/** Mixer session state: the channel-by-channel code under construction,
 * generation history, and the single-in-flight job policy. */

import { MixerClient } from './api.js';
import type { CodeDoc, DictionaryInfo, HistoryRecord, Replacement } from './types.js';
import { assertValidCode, codeToPromptString } from './validation.js';

export class MixerSession {
  readonly client: MixerClient;
  readonly dict: DictionaryInfo;
  readonly maxInFlight: number;

  splits: number[];
  present: boolean[];
  seed = 0;
  styleSuffix = '';
  history: HistoryRecord[] = [];
  private inFlight = 0;

  constructor(client: MixerClient, dict: DictionaryInfo, maxInFlight = 1) {
    this.client = client;
    this.dict = dict;
    this.maxInFlight = maxInFlight;
    this.splits = new Array(dict.M + 1).fill(1);
    this.present = new Array(dict.M + 1).fill(true);
  }

  setSplit(channel: number, split: number): void {
    this.checkChannel(channel);
    if (!(Number.isInteger(split) && split >= 1 && split <= this.dict.K)) {
      throw new RangeError(`split ${split} outside 1..${this.dict.K}`);
    }
    this.splits[channel] = split;
    this.present[channel] = true;
  }

  setPresent(channel: number, present: boolean): void {
    this.checkChannel(channel);
    const next = [...this.present];
    next[channel] = present;
    if (!next.some(Boolean)) {
      throw new RangeError('at least one channel must stay present');
    }
    this.present = next;
  }

  private checkChannel(channel: number): void {
    if (!(Number.isInteger(channel) && channel >= 0 && channel <= this.dict.M)) {
      throw new RangeError(`channel ${channel} outside 0..${this.dict.M}`);
    }
  }

  /** The current code; always satisfies the schema by construction. */
  currentCode(): CodeDoc {
    const code: CodeDoc = {
      pairs: this.splits.map((k, m) => [m, k] as [number, number]),
      present: [...this.present],
    };
    assertValidCode(code, this.dict);
    return code;
  }

  currentPrompt(): string {
    return codeToPromptString(this.currentCode());
  }

  get busy(): boolean {
    return this.inFlight >= this.maxInFlight;
  }

  /** Compose the selections onto a base code, then generate and poll.
   * Validates client-side before any request leaves the session. */
  async generate(
    opts: {
      base?: CodeDoc;
      replacements?: Replacement[];
      pollIntervalMs?: number;
      sleepFn?: (ms: number) => Promise<void>;
    } = {},
  ): Promise<HistoryRecord> {
    if (this.busy) {
      throw new Error('a generation job is already in flight');
    }
    const base = opts.base ?? this.currentCode();
    assertValidCode(base, this.dict);
    for (const rep of opts.replacements ?? []) {
      if (!(rep.channel >= 0 && rep.channel <= this.dict.M)) {
        throw new RangeError(`replacement channel ${rep.channel} out of range`);
      }
      if (!(rep.split >= 1 && rep.split <= this.dict.K)) {
        throw new RangeError(`replacement split ${rep.split} outside 1..${this.dict.K}`);
      }
    }
    this.inFlight += 1;
    try {
      const composed = await this.client.compose(base, opts.replacements ?? []);
      assertValidCode(composed.code, this.dict);
      const submitted = await this.client.submitGenerate(
        composed.code,
        this.seed,
        this.styleSuffix,
      );
      const job = await this.client.pollJob(submitted.job_id, {
        intervalMs: opts.pollIntervalMs,
        sleepFn: opts.sleepFn,
      });
      const record: HistoryRecord = {
        code: composed.code,
        prompt: composed.prompt,
        seed: this.seed,
        styleSuffix: this.styleSuffix,
        jobId: job.job_id,
        imagePngBase64: job.image_png_base64 ?? '',
      };
      this.history.push(record);
      return record;
    } finally {
      this.inFlight -= 1;
    }
  }

  /** Restore selections/seed/suffix from a history entry so the exact
   * image can be regenerated or varied. */
  reselect(index: number): HistoryRecord {
    const record = this.history[index];
    if (!record) {
      throw new RangeError(`no history entry ${index}`);
    }
    record.code.pairs.forEach(([m, k], i) => {
      this.splits[m] = k;
      this.present[i] = record.code.present[i];
    });
    this.seed = record.seed;
    this.styleSuffix = record.styleSuffix;
    return record;
  }

  attention(jobId: string) {
    return this.client.getAttention(jobId);
  }
}
