import { HANDLES, handleCenters } from './boxes.js';
import type { AnnotationState } from './state.js';
import type { Box } from './types.js';
import { imageBoxToCanvas } from './view.js';
import type { ViewTransform } from './view.js';

export const ROUGH_COLOR = '#e5484d';
export const REFINED_COLOR = '#30a46c';
const COMMITTED_COLOR = '#3e63dd';
const HANDLE_SIZE = 7;

function strokeBox(ctx: CanvasRenderingContext2D, box: Box, color: string, dashed = false) {
  const [x1, y1, x2, y2] = box;
  ctx.save();
  ctx.strokeStyle = color;
  ctx.lineWidth = 2;
  if (dashed) ctx.setLineDash([6, 4]);
  ctx.strokeRect(x1, y1, x2 - x1, y2 - y1);
  ctx.restore();
}

function drawHandles(ctx: CanvasRenderingContext2D, box: Box, color: string) {
  ctx.save();
  ctx.fillStyle = color;
  for (const handle of HANDLES) {
    const [cx, cy] = handleCenters(box)[handle];
    ctx.fillRect(cx - HANDLE_SIZE / 2, cy - HANDLE_SIZE / 2, HANDLE_SIZE, HANDLE_SIZE);
  }
  ctx.restore();
}

export interface Scene {
  state: AnnotationState;
  view: ViewTransform;
  image: CanvasImageSource | null;
  imageWidth: number;
  imageHeight: number;
  /** Live rubber band while the pointer is down, already in image space. */
  rubberBand: Box | null;
}

/** Repaint the whole canvas from scratch; called once per state change. */
export function drawScene(ctx: CanvasRenderingContext2D, scene: Scene) {
  const { state, view } = scene;
  ctx.clearRect(0, 0, ctx.canvas.width, ctx.canvas.height);

  if (scene.image !== null) {
    ctx.save();
    ctx.imageSmoothingEnabled = view.zoom < 2;
    ctx.translate(view.panX, view.panY);
    ctx.scale(view.zoom, view.zoom);
    ctx.drawImage(scene.image, 0, 0, scene.imageWidth, scene.imageHeight);
    ctx.restore();
  }

  for (const label of state.committed) {
    strokeBox(ctx, imageBoxToCanvas(view, label.box), COMMITTED_COLOR, true);
  }
  // rough stays visible under the proposal so the delta is readable
  if (state.draft !== null) {
    strokeBox(ctx, imageBoxToCanvas(view, state.draft), ROUGH_COLOR);
  }
  if (scene.rubberBand !== null) {
    strokeBox(ctx, imageBoxToCanvas(view, scene.rubberBand), ROUGH_COLOR, true);
  }
  if (state.proposal !== null) {
    const canvasBox = imageBoxToCanvas(view, state.proposal);
    strokeBox(ctx, canvasBox, REFINED_COLOR);
    drawHandles(ctx, canvasBox, REFINED_COLOR);
  }
}

/** One-line status: mode, refine latency, committed count. */
export function statusLine(state: AnnotationState): string {
  const parts: string[] = [];
  parts.push(state.image ?? 'no image');
  parts.push(state.mode);
  if (state.refinePending) parts.push('refining...');
  else if (state.latencyMs !== null) parts.push(`refined in ${state.latencyMs.toFixed(0)} ms`);
  parts.push(`${state.committed.length} labels`);
  return parts.join(' | ');
}
