/** Contract tests against the mock service: dictionary rendering at the
 * full-scale size, the compose/generate round-trip, client-side rejection
 * of invalid codes, and the attention overlay fetch. */

import { describe, expect, it } from 'vitest';

import { MixerClient, ServiceError } from '../src/api.js';
import { MixerSession } from '../src/session.js';
import {
  dictionaryViewModel,
  renderAttentionOverlay,
  renderHistory,
  renderMixer,
} from '../src/view.js';
import { InvalidCodeError } from '../src/validation.js';
import { makeMockService, TINY_PNG } from './mock_service.js';

const fastSleep = () => Promise.resolve();

async function makeSession(opts = {}) {
  const mock = makeMockService(opts);
  const client = new MixerClient('http://mock', mock.fetchFn);
  const dict = await client.getDictionary();
  return { mock, client, dict, session: new MixerSession(client, dict) };
}

describe('dictionary rendering', () => {
  it('renders the full-scale dictionary: 6 channels x 256 splits', async () => {
    const mock = makeMockService({ M: 5, K: 256 });
    const client = new MixerClient('http://mock', mock.fetchFn);
    const dict = await client.getDictionary();
    expect(dict.M).toBe(5);
    expect(dict.K).toBe(256);
    const views = dictionaryViewModel(dict);
    expect(views).toHaveLength(6);
    expect(views[0].name).toBe('background');
    for (const view of views) {
      expect(view.splitOptions).toHaveLength(256);
      expect(view.splitOptions[0]).toBe(1);
      expect(view.splitOptions[255]).toBe(256);
    }
    const html = renderMixer(views, new Array(6).fill(1), new Array(6).fill(true));
    expect(html.match(/<select/g)).toHaveLength(6);
    expect(html.match(/<option/g)).toHaveLength(6 * 256);
  });
});

describe('compose/generate round-trip', () => {
  it('composes replacements, generates, polls to done, and records history', async () => {
    const { mock, session } = await makeSession();
    session.setSplit(0, 2);
    session.seed = 7;
    session.styleSuffix = 'pencil drawing';
    const record = await session.generate({
      replacements: [{ channel: 1, split: 2 }],
      sleepFn: fastSleep,
      pollIntervalMs: 0,
    });
    expect(record.code.pairs).toEqual([[0, 2], [1, 2], [2, 1]]);
    expect(record.prompt).toBe('(0,2) (1,2) (2,1)');
    expect(record.seed).toBe(7);
    expect(record.styleSuffix).toBe('pencil drawing');
    expect(record.imagePngBase64).toBe(TINY_PNG);
    expect(session.history).toHaveLength(1);

    // Wire contract: compose first, then generate with the composed code.
    const paths = mock.requests.map((r) => `${r.method} ${r.path}`);
    const composeIdx = paths.indexOf('POST /v1/compose');
    const generateIdx = paths.indexOf('POST /v1/generate');
    expect(composeIdx).toBeGreaterThanOrEqual(0);
    expect(generateIdx).toBeGreaterThan(composeIdx);
    const generateBody = mock.requests[generateIdx].body as {
      code: { pairs: number[][] };
      seed: number;
      style_suffix: string;
    };
    expect(generateBody.code.pairs).toEqual([[0, 2], [1, 2], [2, 1]]);
    expect(generateBody.seed).toBe(7);
    expect(generateBody.style_suffix).toBe('pencil drawing');
  });

  it('restores code, seed, and suffix when a history entry is reselected', async () => {
    const { session } = await makeSession();
    session.setSplit(2, 2);
    session.seed = 3;
    await session.generate({ sleepFn: fastSleep, pollIntervalMs: 0 });
    session.setSplit(2, 1);
    session.seed = 99;
    const restored = session.reselect(0);
    expect(session.splits[2]).toBe(2);
    expect(session.seed).toBe(3);
    expect(restored.jobId).toBeTruthy();
    const html = renderHistory(session.history);
    expect(html).toContain('data-role="reselect"');
    expect(html).toContain('seed=3');
  });

  it('enforces one in-flight generation by default', async () => {
    const { session } = await makeSession({ pollsUntilDone: 3 });
    const first = session.generate({ sleepFn: fastSleep, pollIntervalMs: 0 });
    await expect(
      session.generate({ sleepFn: fastSleep, pollIntervalMs: 0 }),
    ).rejects.toThrow(/in flight/);
    await first;
    await session.generate({ sleepFn: fastSleep, pollIntervalMs: 0 });
    expect(session.history).toHaveLength(2);
  });

  it('surfaces a 503 with retry-after when the backend is down', async () => {
    const { session } = await makeSession({ backendDown: true });
    try {
      await session.generate({ sleepFn: fastSleep, pollIntervalMs: 0 });
      expect.unreachable('expected a ServiceError');
    } catch (err) {
      expect(err).toBeInstanceOf(ServiceError);
      expect((err as ServiceError).status).toBe(503);
      expect((err as ServiceError).retryAfter).toBe(5);
    }
  });
});

describe('client-side validation', () => {
  it('rejects invalid codes before any request is sent', async () => {
    const { mock, session } = await makeSession();
    const before = mock.requests.length;
    await expect(
      session.generate({
        base: { pairs: [[0, 1], [1, 99], [2, 1]], present: [true, true, true] },
        sleepFn: fastSleep,
      }),
    ).rejects.toBeInstanceOf(InvalidCodeError);
    expect(mock.requests.length).toBe(before);
  });

  it('refuses out-of-range selections at the control level', async () => {
    const { session } = await makeSession();
    expect(() => session.setSplit(1, 3)).toThrow(RangeError); // K = 2
    expect(() => session.setSplit(9, 1)).toThrow(RangeError);
    session.setPresent(1, false);
    session.setPresent(2, false);
    expect(() => session.setPresent(0, false)).toThrow(/present/);
  });

  it('never produces an invalid current code', async () => {
    const { session, dict } = await makeSession();
    for (let m = 0; m <= dict.M; m++) {
      session.setSplit(m, dict.K);
    }
    session.setPresent(1, false);
    const code = session.currentCode();
    expect(code.pairs).toEqual([[0, 2], [1, 2], [2, 2]]);
    expect(code.present).toEqual([true, false, true]);
  });
});

describe('attention overlay', () => {
  it('fetches one heatmap per present channel and renders the overlay', async () => {
    const { session } = await makeSession();
    session.setPresent(1, false);
    const record = await session.generate({ sleepFn: fastSleep, pollIntervalMs: 0 });
    const attention = await session.attention(record.jobId);
    expect(attention.channels.map((c) => c.channel)).toEqual([0, 2]);
    const html = renderAttentionOverlay(attention.channels);
    expect(html.match(/<img/g)).toHaveLength(2);
    expect(html).toContain('data-channel="0"');
    expect(html).toContain(`data:image/png;base64,${TINY_PNG}`);
  });

  it('404s for unknown jobs', async () => {
    const { client } = await makeSession();
    await expect(client.getAttention('nope')).rejects.toMatchObject({ status: 404 });
  });
});
