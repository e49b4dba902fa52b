/** Image-space box, [x1, y1, x2, y2] in the service's pixel-boundary convention. */
export type Box = [number, number, number, number];

export interface Label {
  id: string;
  image: string;
  class: string;
  box: Box;
  source: string;
}

/** What the workbench is doing right now. */
export type Mode = 'idle' | 'drawing' | 'reviewing';

/** Mirrors the service's refine sanity bound: smaller boxes are noise. */
export const MIN_BOX_AREA = 16;

export interface ImageInfo {
  id: string;
  width: number;
  height: number;
}
