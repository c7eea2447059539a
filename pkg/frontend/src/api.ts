/** Thin typed client for the mixer service; fetch is injectable so the
 * contract tests run against a mock without a network. */

import type {
  AttentionResponse,
  CodeDoc,
  ComposeResponse,
  DictionaryInfo,
  JobStatus,
  Replacement,
} from './types.js';

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ServiceError extends Error {
  status: number;
  detail: unknown;
  retryAfter: number | null;

  constructor(status: number, detail: unknown, retryAfter: number | null = null) {
    super(`service error ${status}: ${JSON.stringify(detail)}`);
    this.name = 'ServiceError';
    this.status = status;
    this.detail = detail;
    this.retryAfter = retryAfter;
  }
}

async function parseOrThrow<T>(resp: Response): Promise<T> {
  if (!resp.ok) {
    let detail: unknown;
    try {
      detail = (await resp.json()).detail;
    } catch {
      detail = await resp.text();
    }
    const retry = resp.headers.get('Retry-After');
    throw new ServiceError(resp.status, detail, retry ? Number(retry) : null);
  }
  return (await resp.json()) as T;
}

const sleep = (ms: number) => new Promise<void>((r) => setTimeout(r, ms));

export class MixerClient {
  private base: string;
  private fetchFn: FetchLike;

  constructor(baseUrl: string, fetchFn?: FetchLike) {
    this.base = baseUrl.replace(/\/+$/, '');
    this.fetchFn = fetchFn ?? ((url, init) => fetch(url, init));
  }

  private post(path: string, body: unknown): Promise<Response> {
    return this.fetchFn(this.base + path, {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify(body),
    });
  }

  async health(): Promise<{ status: string; version: string }> {
    return parseOrThrow(await this.fetchFn(this.base + '/v1/health'));
  }

  async getDictionary(): Promise<DictionaryInfo> {
    return parseOrThrow(await this.fetchFn(this.base + '/v1/dictionary'));
  }

  async compose(base: CodeDoc, replacements: Replacement[]): Promise<ComposeResponse> {
    return parseOrThrow(await this.post('/v1/compose', { base, replacements }));
  }

  async submitGenerate(
    code: CodeDoc,
    seed: number,
    styleSuffix = '',
  ): Promise<{ job_id: string; status: string }> {
    return parseOrThrow(
      await this.post('/v1/generate', { code, seed, style_suffix: styleSuffix }),
    );
  }

  async getJob(jobId: string): Promise<JobStatus> {
    return parseOrThrow(await this.fetchFn(`${this.base}/v1/jobs/${jobId}`));
  }

  async getAttention(jobId: string): Promise<AttentionResponse> {
    return parseOrThrow(await this.fetchFn(`${this.base}/v1/attention/${jobId}`));
  }

  /** Poll until the job reaches a terminal state; resolves with the final
   * status, rejects on failure or timeout. */
  async pollJob(
    jobId: string,
    opts: { intervalMs?: number; timeoutMs?: number; sleepFn?: (ms: number) => Promise<void> } = {},
  ): Promise<JobStatus> {
    const intervalMs = opts.intervalMs ?? 500;
    const timeoutMs = opts.timeoutMs ?? 120_000;
    const sleepFn = opts.sleepFn ?? sleep;
    const deadline = Date.now() + timeoutMs;
    for (;;) {
      const job = await this.getJob(jobId);
      if (job.status === 'done') {
        return job;
      }
      if (job.status === 'failed') {
        throw new ServiceError(502, job.error ?? 'generation failed');
      }
      if (Date.now() >= deadline) {
        throw new ServiceError(504, `job ${jobId} timed out`);
      }
      await sleepFn(intervalMs);
    }
  }
}
