import type { Box } from './types.js';

/**
 * Canvas <-> image mapping. Image pixel (x, y) lands on canvas at
 * (x * zoom + panX, y * zoom + panY); the inverse undoes it exactly, so
 * the round trip is limited only by float math, far inside the 0.5 px
 * budget drawing cares about.
 */
export interface ViewTransform {
  zoom: number;
  panX: number;
  panY: number;
}

export function imageToCanvas(v: ViewTransform, x: number, y: number): [number, number] {
  return [x * v.zoom + v.panX, y * v.zoom + v.panY];
}

export function canvasToImage(v: ViewTransform, x: number, y: number): [number, number] {
  return [(x - v.panX) / v.zoom, (y - v.panY) / v.zoom];
}

export function imageBoxToCanvas(v: ViewTransform, box: Box): Box {
  const [x1, y1] = imageToCanvas(v, box[0], box[1]);
  const [x2, y2] = imageToCanvas(v, box[2], box[3]);
  return [x1, y1, x2, y2];
}

export function canvasBoxToImage(v: ViewTransform, box: Box): Box {
  const [x1, y1] = canvasToImage(v, box[0], box[1]);
  const [x2, y2] = canvasToImage(v, box[2], box[3]);
  return [x1, y1, x2, y2];
}

/** Largest zoom that fits the whole image, centered. */
export function fitView(imageW: number, imageH: number,
                        canvasW: number, canvasH: number): ViewTransform {
  const zoom = Math.min(canvasW / imageW, canvasH / imageH);
  return {
    zoom,
    panX: (canvasW - imageW * zoom) / 2,
    panY: (canvasH - imageH * zoom) / 2,
  };
}

/** Rescale about a canvas point so the pixel under the cursor stays put. */
export function zoomAt(v: ViewTransform, factor: number,
                       canvasX: number, canvasY: number): ViewTransform {
  const zoom = v.zoom * factor;
  return {
    zoom,
    panX: canvasX - (canvasX - v.panX) * factor,
    panY: canvasY - (canvasY - v.panY) * factor,
  };
}

export function panBy(v: ViewTransform, dx: number, dy: number): ViewTransform {
  return { zoom: v.zoom, panX: v.panX + dx, panY: v.panY + dy };
}
