/**
 * Query-explorer UI: load an image, edit text queries, see mask overlays,
 * toggle the background rule and the per-query / proposal views, iterate.
 * Newer submissions cancel in-flight ones; stale responses are discarded.
 */

import { ApiClient } from "./api.js";
import { cssColor, PALETTE } from "./palette.js";
import { decodeRle, labelMapFromRles } from "./rle.js";
import { labelMapToRgba, maskToRgba } from "./overlay.js";
import * as S from "./state.js";

const DEBOUNCE_MS = 300;
const ZOOM = 2; // on top of the stride-4 upsample

const api = new ApiClient("");
let state = S.initialState();
let inflight: AbortController | null = null;
let debounceTimer: number | undefined;
let highlightedProposal: number | null = null;

const el = {
  file: document.getElementById("image-file") as HTMLInputElement,
  queryInput: document.getElementById("query-input") as HTMLInputElement,
  addQuery: document.getElementById("add-query") as HTMLButtonElement,
  submit: document.getElementById("submit") as HTMLButtonElement,
  queryList: document.getElementById("query-list") as HTMLUListElement,
  canvas: document.getElementById("canvas") as HTMLCanvasElement,
  legend: document.getElementById("legend") as HTMLUListElement,
  error: document.getElementById("error") as HTMLDivElement,
  status: document.getElementById("status") as HTMLSpanElement,
  viewMode: document.getElementById("view-mode") as HTMLSelectElement,
  bgRule: document.getElementById("bg-rule") as HTMLInputElement,
  phraseMode: document.getElementById("phrase-mode") as HTMLSelectElement,
  proposalGrid: document.getElementById("proposal-grid") as HTMLDivElement,
};

function setState(next: S.SessionState): void {
  state = next;
  render();
}

function scheduleSubmit(): void {
  window.clearTimeout(debounceTimer);
  debounceTimer = window.setTimeout(() => void submit(), DEBOUNCE_MS);
}

async function loadImage(file: File): Promise<void> {
  const buf = new Uint8Array(await file.arrayBuffer());
  let binary = "";
  buf.forEach(b => { binary += String.fromCharCode(b); });
  const b64 = btoa(binary);
  const img = new Image();
  img.src = `data:image/png;base64,${b64}`;
  await img.decode();
  setState(S.setImage(state, b64, [img.naturalHeight, img.naturalWidth]));
  scheduleSubmit();
}

async function submit(): Promise<void> {
  if (!S.canSubmit(state)) return;
  inflight?.abort();
  inflight = new AbortController();
  const [next, token] = S.beginRequest(state);
  setState(next);
  el.status.textContent = "segmenting…";
  const started = performance.now();
  const enabled = S.enabledQueries(state);
  try {
    if (state.viewMode === "proposals") {
      const resp = await api.proposals(state.imageB64!,
                                       enabled.map(q => q.category),
                                       inflight.signal);
      setState(S.applyProposalsResponse(state, token, resp));
    } else {
      const bg = state.queries.find(q => q.category === "background");
      const resp = await api.segment({
        image: state.imageB64!,
        queries: enabled.map(q => ({ category: q.category })),
        options: {
          phrase_mode: state.phraseMode,
          use_background_rule: state.useBackgroundRule && bg !== undefined,
          fg_categories: state.useBackgroundRule
            ? enabled.map(q => q.category).filter(c => c !== "background")
            : undefined,
        },
      }, inflight.signal);
      setState(S.applySegmentResponse(state, token, resp));
    }
    el.status.textContent =
      `round-trip ${(performance.now() - started).toFixed(0)} ms`;
  } catch (err) {
    if ((err as Error).name === "AbortError") return; // superseded
    setState(S.applyError(state, token, String(err)));
  }
}

function drawBaseImage(ctx: CanvasRenderingContext2D): void {
  if (!state.imageB64) return;
  const img = new Image();
  img.src = `data:image/png;base64,${state.imageB64}`;
  img.onload = () => {
    ctx.imageSmoothingEnabled = false;
    ctx.drawImage(img, 0, 0, el.canvas.width, el.canvas.height);
    drawOverlay(ctx);
  };
}

function drawOverlay(ctx: CanvasRenderingContext2D): void {
  const resp = state.lastResponse;
  if (state.viewMode === "label-map" && resp) {
    const [h, w] = resp.mask_size;
    const labels = labelMapFromRles(resp.mask_size,
                                    resp.label_map.map(e => e.mask));
    const enabled = S.enabledQueries(state);
    const colors = resp.label_map.map((e, k) => {
      const q = enabled.find(q2 => q2.category === e.category);
      return q ? q.color : PALETTE[k % PALETTE.length]!;
    });
    blit(ctx, labelMapToRgba(labels, h, w, colors, 0.45, 4 * ZOOM), w);
  } else if (state.viewMode === "per-query" && resp) {
    const [h, w] = resp.mask_size;
    for (const pq of resp.per_query) {
      const q = S.enabledQueries(state).find(q2 => q2.category === pq.category);
      if (!q) continue;
      blit(ctx, maskToRgba(decodeRle(pq.mask), h, w, q.color, 0.5, 4 * ZOOM), w);
    }
  } else if (state.viewMode === "proposals" && state.lastProposals &&
             highlightedProposal !== null) {
    const props = state.lastProposals;
    const [h, w] = props.mask_size;
    const chosen = props.proposals[highlightedProposal];
    if (chosen) {
      blit(ctx, maskToRgba(decodeRle(chosen.mask), h, w,
                           PALETTE[highlightedProposal % PALETTE.length]!,
                           0.55, 4 * ZOOM), w);
    }
  }
}

function blit(ctx: CanvasRenderingContext2D,
              rgba: Uint8ClampedArray<ArrayBuffer>, maskW: number): void {
  const scaled = new ImageData(rgba, maskW * 4 * ZOOM);
  void createImageBitmap(scaled).then(bitmap => {
    ctx.drawImage(bitmap, 0, 0, el.canvas.width, el.canvas.height);
  });
}

function renderQueryList(): void {
  el.queryList.replaceChildren(...state.queries.map(q => {
    const item = document.createElement("li");
    const checkbox = document.createElement("input");
    checkbox.type = "checkbox";
    checkbox.checked = q.enabled;
    checkbox.addEventListener("change", () => {
      setState(S.toggleQuery(state, q.category));
      scheduleSubmit();
    });
    const swatch = document.createElement("span");
    swatch.className = "swatch";
    swatch.style.background = cssColor(q.color);
    const label = document.createElement("span");
    label.textContent = q.category;
    label.className = "query-name";
    const remove = document.createElement("button");
    remove.textContent = "×";
    remove.addEventListener("click", () => {
      setState(S.removeQuery(state, q.category));
      scheduleSubmit();
    });
    item.append(checkbox, swatch, label, remove);
    return item;
  }));
}

function renderLegend(): void {
  const resp = state.lastResponse;
  if (!resp) {
    el.legend.replaceChildren();
    return;
  }
  el.legend.replaceChildren(...resp.label_map.map(entry => {
    const q = state.queries.find(q2 => q2.category === entry.category);
    const item = document.createElement("li");
    const swatch = document.createElement("span");
    swatch.className = "swatch";
    if (q) swatch.style.background = cssColor(q.color);
    item.append(swatch, document.createTextNode(entry.category));
    return item;
  }));
}

function renderProposalGrid(): void {
  const props = state.lastProposals;
  if (state.viewMode !== "proposals" || !props) {
    el.proposalGrid.replaceChildren();
    el.proposalGrid.hidden = true;
    return;
  }
  el.proposalGrid.hidden = false;
  // tiles ordered by proposal index, stable across reloads
  el.proposalGrid.replaceChildren(...props.proposals.map(p => {
    const tile = document.createElement("div");
    tile.className = "tile" + (highlightedProposal === p.index ? " active" : "");
    const mini = document.createElement("canvas");
    const [h, w] = props.mask_size;
    mini.width = w * 2;
    mini.height = h * 2;
    const ctx = mini.getContext("2d")!;
    const rgba = maskToRgba(decodeRle(p.mask), h, w,
                            PALETTE[p.index % PALETTE.length]!, 1.0, 2);
    ctx.putImageData(new ImageData(rgba, w * 2), 0, 0);
    const caption = document.createElement("div");
    caption.textContent = p.best_phrase
      ? `#${p.index} ${p.best_phrase} (${p.score?.toFixed(2)})`
      : `#${p.index}`;
    tile.append(mini, caption);
    tile.addEventListener("click", () => {
      highlightedProposal = highlightedProposal === p.index ? null : p.index;
      render();
    });
    return tile;
  }));
}

function render(): void {
  el.error.textContent = state.error ?? "";
  el.error.hidden = state.error === null;
  renderQueryList();
  renderLegend();
  renderProposalGrid();
  if (state.imageSize) {
    el.canvas.width = state.imageSize[1] * ZOOM;
    el.canvas.height = state.imageSize[0] * ZOOM;
    const ctx = el.canvas.getContext("2d")!;
    ctx.clearRect(0, 0, el.canvas.width, el.canvas.height);
    drawBaseImage(ctx);
  }
  el.submit.disabled = !S.canSubmit(state);
}

function wire(): void {
  el.file.addEventListener("change", () => {
    const file = el.file.files?.[0];
    if (file) void loadImage(file);
  });
  const add = () => {
    setState(S.addQuery(state, el.queryInput.value));
    el.queryInput.value = "";
    scheduleSubmit();
  };
  el.addQuery.addEventListener("click", add);
  el.queryInput.addEventListener("keydown", e => {
    if (e.key === "Enter") add();
  });
  el.submit.addEventListener("click", () => void submit());
  el.viewMode.addEventListener("change", () => {
    setState({ ...state, viewMode: el.viewMode.value as S.ViewMode });
    scheduleSubmit();
  });
  el.bgRule.addEventListener("change", () => {
    setState({ ...state, useBackgroundRule: el.bgRule.checked });
    scheduleSubmit();
  });
  el.phraseMode.addEventListener("change", () => {
    setState({ ...state,
               phraseMode: el.phraseMode.value as "word" | "mean" });
    scheduleSubmit();
  });
  for (const q of ["red circle", "blue square", "background"]) {
    state = S.addQuery(state, q);
  }
  render();
  void api.health().then(h => {
    el.status.textContent = `model ${h.model_id.slice(0, 12)}…`;
  }).catch(() => {
    el.status.textContent = "service unreachable";
  });
}

wire();
