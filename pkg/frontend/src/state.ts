import type { Box, Label, Mode } from './types.js';

/**
 * Workbench state and its transitions.
 *
 * Everything here is a pure function from state to state; the controller
 * owns the single mutable reference and the network. Boxes live in image
 * coordinates; the canvas mapping is applied at the render/event edge.
 *
 * Modes: idle (nothing in progress), drawing (pointer held down),
 * reviewing (a draft exists; the proposal may still be in flight).
 */
export interface AnnotationState {
  image: string | null;
  draft: Box | null;
  proposal: Box | null;
  /** Whether the user moved a handle since the proposal arrived. */
  proposalEdited: boolean;
  committed: Label[];
  mode: Mode;
  /** Sequence number of the refine request we are willing to apply. */
  refineSeq: number;
  refinePending: boolean;
  latencyMs: number | null;
  /** Last non-blocking failure, shown as a toast. */
  error: string | null;
  /** Offline failures set this; the UI offers a retry button. */
  canRetry: boolean;
}

export function initialState(): AnnotationState {
  return {
    image: null,
    draft: null,
    proposal: null,
    proposalEdited: false,
    committed: [],
    mode: 'idle',
    refineSeq: 0,
    refinePending: false,
    latencyMs: null,
    error: null,
    canRetry: false,
  };
}

export function imageLoaded(s: AnnotationState, image: string, labels: Label[]): AnnotationState {
  return {
    ...initialState(),
    image,
    committed: labels,
  };
}

export function startDrawing(s: AnnotationState): AnnotationState {
  if (s.image === null) return s;
  return { ...s, mode: 'drawing', error: null, canRetry: false };
}

/**
 * Pointer released. A null draft means the drag was below the size
 * threshold and is discarded; otherwise the draft replaces any previous
 * one and any previous proposal is dropped.
 */
export function finishDrawing(s: AnnotationState, draft: Box | null): AnnotationState {
  if (draft === null) {
    return { ...s, mode: s.draft !== null ? 'reviewing' : 'idle' };
  }
  return {
    ...s,
    draft,
    proposal: null,
    proposalEdited: false,
    latencyMs: null,
    mode: 'reviewing',
  };
}

export function refineRequested(s: AnnotationState, seq: number): AnnotationState {
  return { ...s, refineSeq: seq, refinePending: true, error: null, canRetry: false };
}

/** A refine response landed. Responses to superseded requests are dropped. */
export function refineArrived(
  s: AnnotationState, seq: number, box: Box, latencyMs: number,
): AnnotationState {
  if (seq !== s.refineSeq || s.mode !== 'reviewing') return s;
  return { ...s, proposal: box, proposalEdited: false, latencyMs, refinePending: false };
}

export function refineFailed(
  s: AnnotationState, seq: number, message: string, retryable: boolean,
): AnnotationState {
  if (seq !== s.refineSeq) return s;
  // the draft stays; the failure is a toast, not a modal
  return { ...s, refinePending: false, error: message, canRetry: retryable };
}

export function proposalAdjusted(s: AnnotationState, box: Box): AnnotationState {
  if (s.proposal === null) return s;
  return { ...s, proposal: box, proposalEdited: true };
}

/**
 * POST /labels failed. The proposal stays put so the accept button itself
 * is the retry path; canRetry stays false because that button re-refines.
 */
export function saveFailed(s: AnnotationState, message: string): AnnotationState {
  return { ...s, error: message, canRetry: false };
}

/** The service acknowledged the label; the decision cycle is over. */
export function labelCommitted(s: AnnotationState, label: Label): AnnotationState {
  return {
    ...s,
    committed: [...s.committed, label],
    draft: null,
    proposal: null,
    proposalEdited: false,
    latencyMs: null,
    mode: 'idle',
  };
}

/** Reject the proposal: no network write, the draft stays on screen. */
export function proposalRejected(s: AnnotationState): AnnotationState {
  return { ...s, proposal: null, proposalEdited: false, latencyMs: null };
}

/** Drop the draft (and proposal) without committing anything. */
export function draftCleared(s: AnnotationState): AnnotationState {
  return {
    ...s, draft: null, proposal: null, proposalEdited: false,
    latencyMs: null, mode: 'idle',
  };
}

export function labelsSynced(s: AnnotationState, labels: Label[]): AnnotationState {
  return { ...s, committed: labels };
}

export function labelRemoved(s: AnnotationState, id: string): AnnotationState {
  return { ...s, committed: s.committed.filter((l) => l.id !== id) };
}

export function errorCleared(s: AnnotationState): AnnotationState {
  return { ...s, error: null, canRetry: false };
}

export type KeyAction = 'accept' | 'reject' | 'next';

/**
 * Keyboard gating. Enter and Escape act only while reviewing (Enter
 * additionally needs a proposal to accept); ArrowRight pages only from
 * idle so a half-finished decision can't be skipped past.
 */
export function keyAction(s: AnnotationState, key: string): KeyAction | null {
  if (key === 'Enter' && s.mode === 'reviewing' && s.proposal !== null) return 'accept';
  if (key === 'Escape' && s.mode === 'reviewing') return 'reject';
  if (key === 'ArrowRight' && s.mode === 'idle') return 'next';
  return null;
}
