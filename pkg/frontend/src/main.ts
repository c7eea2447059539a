/** Browser bootstrap: wires the session to the DOM. Logic lives in the
 * testable modules; this file only routes events. */

import { MixerClient } from './api.js';
import { MixerSession } from './session.js';
import {
  dictionaryViewModel,
  renderAttentionOverlay,
  renderHistory,
  renderMixer,
  renderResult,
} from './view.js';

const SERVICE_URL =
  new URLSearchParams(window.location.search).get('service') ?? 'http://127.0.0.1:8111';

function byId(id: string): HTMLElement {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing #${id}`);
  return el;
}

async function boot(): Promise<void> {
  const client = new MixerClient(SERVICE_URL);
  const dict = await client.getDictionary();
  const session = new MixerSession(client, dict);
  const views = dictionaryViewModel(dict);

  const mixerEl = byId('mixer');
  const resultEl = byId('result');
  const historyEl = byId('history');
  const attentionEl = byId('attention');
  const statusEl = byId('status');
  const seedEl = byId('seed') as HTMLInputElement;
  const suffixEl = byId('style-suffix') as HTMLInputElement;
  const attnToggle = byId('attention-toggle') as HTMLInputElement;

  const redraw = () => {
    mixerEl.innerHTML = renderMixer(views, session.splits, session.present);
    historyEl.innerHTML = renderHistory(session.history);
    statusEl.textContent = session.currentPrompt();
  };

  mixerEl.addEventListener('change', (ev) => {
    const target = ev.target as HTMLElement;
    const channel = Number(target.dataset.channel);
    if (target.dataset.role === 'split') {
      session.setSplit(channel, Number((target as HTMLSelectElement).value));
    } else if (target.dataset.role === 'present') {
      try {
        session.setPresent(channel, (target as HTMLInputElement).checked);
      } catch (err) {
        statusEl.textContent = String(err);
      }
    }
    redraw();
  });

  historyEl.addEventListener('click', (ev) => {
    const target = ev.target as HTMLElement;
    if (target.dataset.role === 'reselect') {
      session.reselect(Number(target.dataset.index));
      seedEl.value = String(session.seed);
      suffixEl.value = session.styleSuffix;
      redraw();
    }
  });

  byId('generate').addEventListener('click', async () => {
    if (session.busy) {
      statusEl.textContent = 'a generation is already running';
      return;
    }
    session.seed = Number(seedEl.value) || 0;
    session.styleSuffix = suffixEl.value.trim();
    statusEl.textContent = 'generating…';
    attentionEl.innerHTML = '';
    try {
      const record = await session.generate();
      resultEl.innerHTML = renderResult(record);
      if (attnToggle.checked) {
        const attention = await session.attention(record.jobId);
        attentionEl.innerHTML = renderAttentionOverlay(attention.channels);
      }
      statusEl.textContent = `done: ${record.prompt}`;
    } catch (err) {
      statusEl.textContent = `error: ${String(err)}`;
    }
    redraw();
  });

  attnToggle.addEventListener('change', async () => {
    const last = session.history[session.history.length - 1];
    if (!last) return;
    attentionEl.innerHTML = attnToggle.checked
      ? renderAttentionOverlay((await session.attention(last.jobId)).channels)
      : '';
  });

  redraw();
}

boot().catch((err) => {
  document.body.textContent = `failed to reach the mixer service: ${err}`;
});
