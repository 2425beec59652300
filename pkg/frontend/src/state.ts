/**
 * Session state for the query explorer: the loaded image, the editable query
 * list with per-query colors, view mode, and stale-response bookkeeping.
 * Pure data + transition helpers so the logic is testable without a DOM.
 */

import type { SegmentResponse, ProposalsResponse } from "./api.js";
import { colorFor, type Rgb } from "./palette.js";

export type ViewMode = "label-map" | "per-query" | "proposals";

export interface QueryEntry {
  category: string;
  color: Rgb;
  enabled: boolean;
}

export interface SessionState {
  imageB64: string | null;
  imageSize: [number, number] | null;
  queries: QueryEntry[];
  viewMode: ViewMode;
  useBackgroundRule: boolean;
  fgCategories: string[];
  phraseMode: "word" | "mean";
  lastResponse: SegmentResponse | null;
  lastProposals: ProposalsResponse | null;
  /** Token of the most recent request; older responses are discarded. */
  requestToken: number;
  error: string | null;
}

export function initialState(): SessionState {
  return {
    imageB64: null,
    imageSize: null,
    queries: [],
    viewMode: "label-map",
    useBackgroundRule: false,
    fgCategories: [],
    phraseMode: "word",
    lastResponse: null,
    lastProposals: null,
    requestToken: 0,
    error: null,
  };
}

/** Colors must stay unique among enabled queries. */
function nextFreeColor(state: SessionState): Rgb {
  const used = new Set(state.queries.filter(q => q.enabled)
    .map(q => q.color.join(",")));
  for (let k = 0; k < 64; k++) {
    const candidate = colorFor(k);
    if (!used.has(candidate.join(","))) return candidate;
  }
  return colorFor(state.queries.length);
}

export function setImage(state: SessionState, b64: string,
                         size: [number, number]): SessionState {
  return { ...state, imageB64: b64, imageSize: size, lastResponse: null,
           lastProposals: null, error: null };
}

export function addQuery(state: SessionState, category: string): SessionState {
  const trimmed = category.trim();
  if (!trimmed) return state;
  if (state.queries.some(q => q.category === trimmed)) return state;
  const entry: QueryEntry = { category: trimmed, color: nextFreeColor(state),
                              enabled: true };
  return { ...state, queries: [...state.queries, entry] };
}

export function removeQuery(state: SessionState, category: string): SessionState {
  return { ...state, queries: state.queries.filter(q => q.category !== category) };
}

export function toggleQuery(state: SessionState, category: string): SessionState {
  return {
    ...state,
    queries: state.queries.map(q =>
      q.category === category ? { ...q, enabled: !q.enabled } : q),
  };
}

export function renameQuery(state: SessionState, from: string,
                            to: string): SessionState {
  const trimmed = to.trim();
  if (!trimmed || state.queries.some(q => q.category === trimmed)) return state;
  return {
    ...state,
    queries: state.queries.map(q =>
      q.category === from ? { ...q, category: trimmed } : q),
  };
}

export function enabledQueries(state: SessionState): QueryEntry[] {
  return state.queries.filter(q => q.enabled);
}

export function canSubmit(state: SessionState): boolean {
  return state.imageB64 !== null && enabledQueries(state).length > 0;
}

/** Claim a token before sending a request. */
export function beginRequest(state: SessionState): [SessionState, number] {
  const token = state.requestToken + 1;
  return [{ ...state, requestToken: token }, token];
}

/** A response only lands if no newer request has been issued since. */
export function applySegmentResponse(state: SessionState, token: number,
                                     response: SegmentResponse): SessionState {
  if (token !== state.requestToken) return state; // stale; discard
  return { ...state, lastResponse: response, error: null };
}

export function applyProposalsResponse(state: SessionState, token: number,
                                       response: ProposalsResponse): SessionState {
  if (token !== state.requestToken) return state;
  return { ...state, lastProposals: response, error: null };
}

export function applyError(state: SessionState, token: number,
                           message: string): SessionState {
  if (token !== state.requestToken) return state;
  return { ...state, error: message }; // query text stays untouched
}

export function invariantUniqueColors(state: SessionState): boolean {
  const colors = enabledQueries(state).map(q => q.color.join(","));
  return new Set(colors).size === colors.length;
}
