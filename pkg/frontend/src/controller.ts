import { OfflineError, ServiceClient, ServiceError } from './api.js';
import { applyHandleDrag, boxesEqual, clampToImage, isValidBox } from './boxes.js';
import type { Handle } from './boxes.js';
import * as st from './state.js';
import type { AnnotationState } from './state.js';
import type { Box, ImageInfo, Label } from './types.js';

type Listener = (state: AnnotationState) => void;

/**
 * Drives the annotation loop against the refinement service.
 *
 * The controller is the only writer of the state; every mutation goes
 * through set() so subscribers (the render layer) repaint once per change.
 * Refine responses are matched to the request that produced them by a
 * monotonically increasing sequence number; a response for a draft the
 * user has already replaced is dropped on the floor.
 */
export class AnnotatorController {
  state: AnnotationState;
  images: ImageInfo[] = [];
  imageIndex = -1;
  autoRefine = true;
  classTag = 'object';

  private client: ServiceClient;
  private seq = 0;
  private listeners: Listener[] = [];

  constructor(client: ServiceClient) {
    this.client = client;
    this.state = st.initialState();
  }

  subscribe(fn: Listener) {
    this.listeners.push(fn);
  }

  private set(next: AnnotationState) {
    if (next === this.state) return;
    this.state = next;
    for (const fn of this.listeners) fn(next);
  }

  currentImage(): ImageInfo | null {
    return this.images[this.imageIndex] ?? null;
  }

  async loadImageList(): Promise<void> {
    const all: ImageInfo[] = [];
    let page = 0;
    for (;;) {
      const chunk = await this.client.listImages(page, 200);
      all.push(...chunk.images);
      if (all.length >= chunk.total || chunk.images.length === 0) break;
      page += 1;
    }
    this.images = all;
  }

  async openImage(index: number): Promise<void> {
    if (index < 0 || index >= this.images.length) return;
    this.imageIndex = index;
    const id = this.images[index].id;
    const labels = await this.client.labels(id);
    this.set(st.imageLoaded(this.state, id, labels));
  }

  async nextImage(): Promise<void> {
    if (this.images.length === 0) return;
    await this.openImage((this.imageIndex + 1) % this.images.length);
  }

  beginDraft() {
    this.set(st.startDrawing(this.state));
  }

  /** Pointer released; draft is in image coordinates, or null if discarded. */
  async endDraft(draft: Box | null): Promise<void> {
    const image = this.currentImage();
    let clipped = draft;
    if (clipped !== null && image !== null) {
      clipped = clampToImage(clipped, image.width, image.height);
      // a drag mostly off-image can clamp down to nothing
      if (!isValidBox(clipped)) clipped = null;
    }
    this.set(st.finishDrawing(this.state, clipped));
    if (clipped !== null && this.autoRefine) {
      await this.requestRefine();
    }
  }

  async requestRefine(): Promise<void> {
    const { draft, image } = this.state;
    if (draft === null || image === null) return;
    const seq = ++this.seq;
    this.set(st.refineRequested(this.state, seq));
    try {
      const result = await this.client.refine(image, draft);
      this.set(st.refineArrived(this.state, seq, result.box, result.latencyMs));
    } catch (err) {
      if (err instanceof OfflineError) {
        this.set(st.refineFailed(this.state, seq, 'service unreachable', true));
      } else if (err instanceof ServiceError) {
        this.set(st.refineFailed(this.state, seq, err.message, false));
      } else {
        throw err;
      }
    }
  }

  /** Move one proposal edge/corner; dx/dy in image pixels. */
  adjustProposal(handle: Handle, dx: number, dy: number) {
    const { proposal } = this.state;
    const image = this.currentImage();
    if (proposal === null) return;
    let moved = applyHandleDrag(proposal, handle, dx, dy);
    if (moved === null) return;
    if (image !== null) moved = clampToImage(moved, image.width, image.height);
    if (boxesEqual(moved, proposal)) return;
    this.set(st.proposalAdjusted(this.state, moved));
  }

  /**
   * Commit the proposal. Untouched proposals are stored as the model's
   * work; once the user has dragged a handle the label is theirs.
   */
  async accept(): Promise<void> {
    const { proposal, image, proposalEdited } = this.state;
    if (proposal === null || image === null) return;
    if (!isValidBox(proposal)) return;
    const source = proposalEdited ? 'human' : 'model';
    try {
      const id = await this.client.addLabel(image, this.classTag, proposal, source);
      const label: Label = {
        id, image, class: this.classTag, box: proposal, source,
      };
      this.set(st.labelCommitted(this.state, label));
    } catch (err) {
      if (err instanceof OfflineError || err instanceof ServiceError) {
        this.set(st.saveFailed(this.state, `save failed: ${err.message}`));
        return;
      }
      throw err;
    }
  }

  /** Drop the proposal and keep the draft. Never touches the network. */
  reject() {
    this.set(st.proposalRejected(this.state));
  }

  clearDraft() {
    this.set(st.draftCleared(this.state));
  }

  async deleteLabel(id: string): Promise<void> {
    await this.client.deleteLabel(id);
    this.set(st.labelRemoved(this.state, id));
  }

  async syncLabels(): Promise<void> {
    if (this.state.image === null) return;
    const labels = await this.client.labels(this.state.image);
    this.set(st.labelsSynced(this.state, labels));
  }

  /** Route a keyboard event; returns the action taken, if any. */
  async handleKey(key: string): Promise<st.KeyAction | null> {
    const action = st.keyAction(this.state, key);
    if (action === 'accept') await this.accept();
    else if (action === 'reject') this.reject();
    else if (action === 'next') await this.nextImage();
    return action;
  }

  dismissError() {
    this.set(st.errorCleared(this.state));
  }
}
