import type { Box, ImageInfo, Label } from './types.js';

/** Non-2xx answer from the service; status lets callers pick a reaction. */
export class ServiceError extends Error {
  status: number;

  constructor(status: number, detail: string) {
    super(detail);
    this.status = status;
  }
}

/** fetch itself failed: service down, network gone. Retryable. */
export class OfflineError extends Error {
  constructor(cause: unknown) {
    super(`service unreachable: ${cause instanceof Error ? cause.message : String(cause)}`);
  }
}

export interface RefineResult {
  box: Box;
  latencyMs: number;
}

async function request(url: string, init?: RequestInit): Promise<unknown> {
  let response: Response;
  try {
    response = await fetch(url, init);
  } catch (err) {
    throw new OfflineError(err);
  }
  let body: unknown = null;
  try {
    body = await response.json();
  } catch {
    // non-JSON error pages fall through with a null body
  }
  if (!response.ok) {
    const detail = (body as { error?: string } | null)?.error
      ?? `${response.status} ${response.statusText}`;
    throw new ServiceError(response.status, detail);
  }
  return body;
}

function post(url: string, payload: unknown): Promise<unknown> {
  return request(url, {
    method: 'POST',
    headers: { 'Content-Type': 'application/json' },
    body: JSON.stringify(payload),
  });
}

/** Thin typed client over the refinement service's HTTP API. */
export class ServiceClient {
  base: string;

  constructor(base: string) {
    this.base = base.replace(/\/$/, '');
  }

  async health(): Promise<{ status: string; model: Record<string, unknown> }> {
    return await request(`${this.base}/health`) as
      { status: string; model: Record<string, unknown> };
  }

  async listImages(page = 0, pageSize = 200): Promise<{ images: ImageInfo[]; total: number }> {
    return await request(
      `${this.base}/images?page=${page}&page_size=${pageSize}`) as
      { images: ImageInfo[]; total: number };
  }

  imageUrl(id: string): string {
    return `${this.base}/images/${encodeURIComponent(id)}`;
  }

  async refine(image: string, box: Box): Promise<RefineResult> {
    const body = await post(`${this.base}/refine`, { image, box }) as
      { box: Box; latency_ms: number };
    return { box: body.box, latencyMs: body.latency_ms };
  }

  async addLabel(image: string, cls: string, box: Box, source: string): Promise<string> {
    const body = await post(`${this.base}/labels`,
      { image, class: cls, box, source }) as { id: string };
    return body.id;
  }

  async labels(image: string): Promise<Label[]> {
    const body = await request(
      `${this.base}/labels?image=${encodeURIComponent(image)}`) as { labels: Label[] };
    return body.labels;
  }

  async deleteLabel(id: string): Promise<void> {
    await request(`${this.base}/labels/${id}`, { method: 'DELETE' });
  }
}
