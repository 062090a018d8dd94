/** Typed client for the key-point field service.
 *
 * Every outbound request body is validated against the wire schema before
 * it leaves the client, so a shape bug surfaces locally instead of as a
 * server 400.
 */

import { z } from "zod";

export const KeypointsSchema = z.array(z.array(z.number()).length(2)).min(1);

export const CameraSpecSchema = z.union([
  z.object({ preset: z.number().int().nonnegative() }),
  z.object({
    o: z.array(z.number()).length(2),
    orientation: z.number(),
    f: z.number().positive(),
    c: z.number(),
  }),
]);

export const RenderRequestSchema = z.object({
  camera: CameraSpecSchema.optional(),
  keypoints: KeypointsSchema,
  base_frame: z.number().int().nonnegative(),
  seed: z.number().int(),
  samples: z.number().int().positive().optional(),
});

export const DefaultDepthRequestSchema = z.object({
  pixel: z.number(),
  camera: CameraSpecSchema.optional(),
  k: z.number().int().positive().optional(),
});

export const VideoRequestSchema = z.object({
  trail: z
    .array(z.object({ time: z.number(), keypoints: KeypointsSchema }))
    .min(2),
  n_frames: z.number().int().min(2),
  camera: CameraSpecSchema.optional(),
  base_frame: z.number().int().nonnegative(),
  seed: z.number().int(),
  samples: z.number().int().positive().optional(),
});

export const StateSchema = z.object({
  d: z.number().int(),
  n_keypoints: z.number().int().positive(),
  frames: z.number().int().positive(),
  width: z.number().int().positive(),
  near: z.number(),
  far: z.number(),
  background: z.array(z.number()).length(3),
  bounds_lo: z.array(z.number()),
  bounds_hi: z.array(z.number()),
  t_ref: z.array(z.number().int()),
  base_frame: z.number().int(),
  camera_presets: z.array(
    z.object({
      o: z.array(z.number()).length(2),
      orientation: z.number(),
      f: z.number(),
      c: z.number(),
    }),
  ),
  keypoints: KeypointsSchema,
  density_res: z.number().int().positive(),
});

export const RenderResponseSchema = z.object({
  width: z.number().int(),
  image_b64: z.string(),
  depth_b64: z.string(),
  opacity_b64: z.string(),
  density_b64: z.string(),
  density_res: z.number().int(),
  warning_extrapolation: z.boolean(),
});

export const VideoResponseSchema = z.object({
  width: z.number().int(),
  frames: z.array(z.string()).min(1),
});

export type RenderRequest = z.infer<typeof RenderRequestSchema>;
export type VideoRequest = z.infer<typeof VideoRequestSchema>;
export type ServiceState = z.infer<typeof StateSchema>;
export type RenderResponse = z.infer<typeof RenderResponseSchema>;
export type CameraSpec = z.infer<typeof CameraSpecSchema>;

export class ServiceError extends Error {
  constructor(
    public status: number,
    message: string,
  ) {
    super(message);
  }
}

export class ApiClient {
  constructor(
    private baseUrl: string,
    private fetchFn: typeof fetch = fetch,
  ) {}

  private async get(path: string): Promise<unknown> {
    const resp = await this.fetchFn(this.baseUrl + path);
    const body = (await resp.json()) as Record<string, unknown>;
    if (!resp.ok) {
      throw new ServiceError(resp.status, String(body.error ?? resp.status));
    }
    return body;
  }

  private async post(path: string, body: unknown): Promise<unknown> {
    const resp = await this.fetchFn(this.baseUrl + path, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
    const data = (await resp.json()) as Record<string, unknown>;
    if (!resp.ok) {
      throw new ServiceError(resp.status, String(data.error ?? resp.status));
    }
    return data;
  }

  async state(): Promise<ServiceState> {
    return StateSchema.parse(await this.get("/state"));
  }

  async keypoints(frame: number): Promise<number[][]> {
    const body = (await this.get(`/keypoints?frame=${frame}`)) as {
      keypoints: number[][];
    };
    return KeypointsSchema.parse(body.keypoints);
  }

  async render(req: RenderRequest): Promise<RenderResponse> {
    const valid = RenderRequestSchema.parse(req);
    return RenderResponseSchema.parse(await this.post("/render", valid));
  }

  async defaultDepth(pixel: number, camera?: CameraSpec, k?: number): Promise<number> {
    const req = DefaultDepthRequestSchema.parse({ pixel, camera, k });
    const body = (await this.post("/default_depth", req)) as { depth: number };
    return body.depth;
  }

  async video(req: VideoRequest): Promise<z.infer<typeof VideoResponseSchema>> {
    const valid = VideoRequestSchema.parse(req);
    return VideoResponseSchema.parse(await this.post("/video", valid));
  }
}
