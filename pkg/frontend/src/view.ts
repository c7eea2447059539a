/** DOM-free view helpers: view-model builders and HTML-string renderers,
 * so render logic is testable without a browser. */

import type { AttentionChannel, DictionaryInfo, HistoryRecord } from './types.js';
import { codeToPromptString } from './validation.js';

export interface ChannelView {
  index: number;
  name: string;
  splitOptions: number[];
}

export function dictionaryViewModel(dict: DictionaryInfo): ChannelView[] {
  return dict.channels.map((ch) => ({
    index: ch.index,
    name: ch.name,
    splitOptions: Array.from({ length: ch.splits }, (_, i) => i + 1),
  }));
}

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, '&amp;')
    .replace(/</g, '&lt;')
    .replace(/>/g, '&gt;')
    .replace(/"/g, '&quot;');
}

export function renderChannelSelector(
  view: ChannelView,
  selected: number,
  present: boolean,
): string {
  const options = view.splitOptions
    .map(
      (k) =>
        `<option value="${k}"${k === selected ? ' selected' : ''}>split ${k}</option>`,
    )
    .join('');
  return (
    `<div class="channel" data-channel="${view.index}">` +
    `<label>${escapeHtml(view.name)}</label>` +
    `<select data-role="split" data-channel="${view.index}">${options}</select>` +
    `<input type="checkbox" data-role="present" data-channel="${view.index}"` +
    `${present ? ' checked' : ''}/>` +
    `</div>`
  );
}

export function renderMixer(
  views: ChannelView[],
  splits: number[],
  present: boolean[],
): string {
  return views
    .map((v) => renderChannelSelector(v, splits[v.index], present[v.index]))
    .join('\n');
}

export function renderResult(record: HistoryRecord): string {
  return (
    `<figure class="result">` +
    `<img alt="generated" src="data:image/png;base64,${record.imagePngBase64}"/>` +
    `<figcaption>` +
    `<code class="copyable" data-role="repro">` +
    escapeHtml(
      JSON.stringify({
        code: record.code,
        seed: record.seed,
        style_suffix: record.styleSuffix,
      }),
    ) +
    `</code>` +
    `<span class="prompt">${escapeHtml(record.prompt)}</span>` +
    `</figcaption></figure>`
  );
}

export function renderHistory(history: HistoryRecord[]): string {
  return history
    .map(
      (rec, i) =>
        `<li class="history-item" data-index="${i}">` +
        `<img alt="history ${i}" src="data:image/png;base64,${rec.imagePngBase64}"/>` +
        `<span>${escapeHtml(codeToPromptString(rec.code))} seed=${rec.seed}` +
        `${rec.styleSuffix ? ' · ' + escapeHtml(rec.styleSuffix) : ''}</span>` +
        `<button data-role="reselect" data-index="${i}">reuse</button>` +
        `</li>`,
    )
    .join('\n');
}

export function renderAttentionOverlay(channels: AttentionChannel[]): string {
  return channels
    .map(
      (ch) =>
        `<img class="attention-layer" data-channel="${ch.channel}" ` +
        `alt="attention channel ${ch.channel}" ` +
        `src="data:image/png;base64,${ch.png_base64}"/>`,
    )
    .join('\n');
}
