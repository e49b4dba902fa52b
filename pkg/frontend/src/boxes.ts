import { MIN_BOX_AREA } from './types.js';
import type { Box } from './types.js';
import { canvasToImage } from './view.js';
import type { ViewTransform } from './view.js';

export function boxArea(box: Box): number {
  return (box[2] - box[0]) * (box[3] - box[1]);
}

/** Same checks the service runs on /refine and /labels bodies. */
export function isValidBox(box: Box): boolean {
  if (box.length !== 4 || box.some((v) => !Number.isFinite(v))) return false;
  if (box[0] >= box[2] || box[1] >= box[3]) return false;
  return boxArea(box) >= MIN_BOX_AREA;
}

/** Corner-sorted box from two drag endpoints. */
export function normalize(x0: number, y0: number, x1: number, y1: number): Box {
  return [Math.min(x0, x1), Math.min(y0, y1), Math.max(x0, x1), Math.max(y0, y1)];
}

/**
 * Turn a canvas drag into an image-space draft box. Tiny drags (area under
 * 16 image px^2, likely a slipped click) yield null instead of a draft.
 */
export function dragToDraft(v: ViewTransform, startX: number, startY: number,
                            endX: number, endY: number): Box | null {
  const [ix0, iy0] = canvasToImage(v, startX, startY);
  const [ix1, iy1] = canvasToImage(v, endX, endY);
  const box = normalize(ix0, iy0, ix1, iy1);
  return isValidBox(box) ? box : null;
}

export type Handle =
  | 'left' | 'right' | 'top' | 'bottom'
  | 'top-left' | 'top-right' | 'bottom-left' | 'bottom-right';

export const HANDLES: Handle[] = [
  'top-left', 'top', 'top-right', 'right',
  'bottom-right', 'bottom', 'bottom-left', 'left',
];

/** Center point of each handle's grab square. */
export function handleCenters(box: Box): Record<Handle, [number, number]> {
  const [x1, y1, x2, y2] = box;
  const mx = (x1 + x2) / 2;
  const my = (y1 + y2) / 2;
  return {
    'left': [x1, my], 'right': [x2, my], 'top': [mx, y1], 'bottom': [mx, y2],
    'top-left': [x1, y1], 'top-right': [x2, y1],
    'bottom-left': [x1, y2], 'bottom-right': [x2, y2],
  };
}

const EDGE_OF: Record<Handle, Array<'left' | 'right' | 'top' | 'bottom'>> = {
  'left': ['left'], 'right': ['right'], 'top': ['top'], 'bottom': ['bottom'],
  'top-left': ['top', 'left'], 'top-right': ['top', 'right'],
  'bottom-left': ['bottom', 'left'], 'bottom-right': ['bottom', 'right'],
};

/**
 * Which adjust handle (if any) an image-space point grabs. Corners win
 * over edges so a corner drag moves both of its sides.
 */
export function hitHandle(box: Box, x: number, y: number, tol: number): Handle | null {
  const nearL = Math.abs(x - box[0]) <= tol;
  const nearR = Math.abs(x - box[2]) <= tol;
  const nearT = Math.abs(y - box[1]) <= tol;
  const nearB = Math.abs(y - box[3]) <= tol;
  const insideX = x >= box[0] - tol && x <= box[2] + tol;
  const insideY = y >= box[1] - tol && y <= box[3] + tol;
  if (nearT && nearL) return 'top-left';
  if (nearT && nearR) return 'top-right';
  if (nearB && nearL) return 'bottom-left';
  if (nearB && nearR) return 'bottom-right';
  if (nearL && insideY) return 'left';
  if (nearR && insideY) return 'right';
  if (nearT && insideX) return 'top';
  if (nearB && insideX) return 'bottom';
  return null;
}

/**
 * Move the grabbed edge(s) by an image-space delta; the other edges stay
 * exactly where they were. Returns null if the result would be invalid,
 * so callers keep the pre-drag box rather than committing garbage.
 */
export function applyHandleDrag(box: Box, handle: Handle,
                                dx: number, dy: number): Box | null {
  const out: Box = [...box] as Box;
  for (const edge of EDGE_OF[handle]) {
    if (edge === 'left') out[0] += dx;
    else if (edge === 'right') out[2] += dx;
    else if (edge === 'top') out[1] += dy;
    else out[3] += dy;
  }
  return isValidBox(out) ? out : null;
}

/** Clamp a box to the image rectangle, preserving validity checks upstream. */
export function clampToImage(box: Box, width: number, height: number): Box {
  return [
    Math.min(Math.max(box[0], 0), width),
    Math.min(Math.max(box[1], 0), height),
    Math.min(Math.max(box[2], 0), width),
    Math.min(Math.max(box[3], 0), height),
  ];
}

export function boxesEqual(a: Box | null, b: Box | null): boolean {
  if (a === null || b === null) return a === b;
  return a.every((v, i) => v === b[i]);
}
