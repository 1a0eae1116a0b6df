/** Typed client for the render service. All three endpoints, nothing else. */

export interface WireCamera {
  pose: number[];        // row-major 3x4 world-to-camera [R|t]
  intrinsics: number[];  // fx, fy, cx, cy in pixels
  resolution: [number, number];
}

export interface Meta {
  primitive_count: number;
  sh_degree: number;
  provenance: string;
  s_bright_range: [number, number];
  sweep_points: number[];
  default_camera: WireCamera;
  max_resolution: number;
  field: { center: number[]; extent: number[] };
}

export interface RenderRequest {
  pose: number[];
  intrinsics: number[];
  resolution: [number, number];
  s_bright: number;
  encoding?: "png";
}

export interface SweepEntry {
  s: number;
  mean_luminance: number;
}

export interface RenderClient {
  meta(): Promise<Meta>;
  render(req: RenderRequest): Promise<Uint8Array>;
  sweep(n: number): Promise<SweepEntry[]>;
}

export class ApiError extends Error {
  constructor(readonly status: number, detail: string) {
    super(`service returned ${status}: ${detail}`);
  }
}

async function errorDetail(resp: Response): Promise<string> {
  try {
    const body = (await resp.json()) as { detail?: unknown };
    return typeof body.detail === "string"
      ? body.detail
      : JSON.stringify(body.detail ?? body);
  } catch {
    return resp.statusText;
  }
}

export class ApiClient implements RenderClient {
  constructor(readonly baseUrl: string) {}

  async meta(): Promise<Meta> {
    const resp = await fetch(`${this.baseUrl}/meta`);
    if (!resp.ok) throw new ApiError(resp.status, await errorDetail(resp));
    return (await resp.json()) as Meta;
  }

  async render(req: RenderRequest): Promise<Uint8Array> {
    const resp = await fetch(`${this.baseUrl}/render`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(req),
    });
    if (!resp.ok) throw new ApiError(resp.status, await errorDetail(resp));
    return new Uint8Array(await resp.arrayBuffer());
  }

  async sweep(n: number): Promise<SweepEntry[]> {
    const resp = await fetch(`${this.baseUrl}/sweep?n=${n}`);
    if (!resp.ok) throw new ApiError(resp.status, await errorDetail(resp));
    const body = (await resp.json()) as { entries: SweepEntry[] };
    return body.entries;
  }
}
