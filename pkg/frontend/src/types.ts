/** Wire-level shapes of the mixer service API. */

export type Pair = [number, number];

export interface CodeDoc {
  pairs: Pair[];
  present: boolean[];
}

export interface DictionaryChannel {
  index: number;
  name: string;
  splits: number;
}

export interface DictionaryInfo {
  M: number;
  K: number;
  dim: number;
  dataset_name: string;
  channels: DictionaryChannel[];
}

export interface Replacement {
  channel: number;
  split: number;
}

export interface ComposeResponse {
  code: CodeDoc;
  prompt: string;
}

export type JobState = 'queued' | 'running' | 'done' | 'failed';

export interface JobStatus {
  job_id: string;
  status: JobState;
  seed: number;
  code: CodeDoc;
  style_suffix: string;
  error: string | null;
  image_png_base64?: string;
}

export interface AttentionChannel {
  channel: number;
  png_base64: string;
}

export interface AttentionResponse {
  job_id: string;
  channels: AttentionChannel[];
}

/** One reproducible generation: everything needed to recreate the image. */
export interface HistoryRecord {
  code: CodeDoc;
  prompt: string;
  seed: number;
  styleSuffix: string;
  jobId: string;
  imagePngBase64: string;
}
