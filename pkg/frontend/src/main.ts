/** Browser entry: wires the service client to canvases and controls.
 *
 * Layout: the rendered 1-px image row shown as a stretched strip, the
 * density map as a top-down view with draggable key points, a depth
 * slider seeded from /default_depth, viewpoint scrubbing over camera
 * presets, and trail record / video scrub controls.
 */

import { ApiClient, RenderResponse, ServiceState } from "./api.js";
import { b64ToFloat64, densityToRgba, rgbRowToRgba } from "./decode.js";
import {
  CameraParams,
  dragInView,
  distance,
  mapToWorld,
  nearestKeypoint,
  project,
  setDepth,
  worldToMap,
} from "./geometry.js";
import { RenderScheduler } from "./scheduler.js";
import {
  EditorState,
  initialState,
  moveKeypoint,
  recordTrailEntry,
  renderRequestOf,
  saveSession,
  loadSession,
  clearTrail,
} from "./state.js";

const MAP_SIZE = 480;
const STRIP_H = 72;
const DEBOUNCE_MS = 100;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

class EditorApp {
  private api: ApiClient;
  private svc!: ServiceState;
  private state!: EditorState;
  private last: RenderResponse | null = null;
  private videoFrames: Float64Array[] = [];
  private scheduler: RenderScheduler<RenderResponse>;
  private dragging = -1;

  constructor(baseUrl: string) {
    this.api = new ApiClient(baseUrl);
    this.scheduler = new RenderScheduler<RenderResponse>(
      DEBOUNCE_MS,
      (r) => this.applyRender(r),
      (e) => this.banner(String(e)),
    );
  }

  async start(): Promise<void> {
    this.svc = await this.api.state();
    this.state = initialState(this.svc);
    this.buildControls();
    this.requestRender();
    this.banner("");
  }

  private camera(): CameraParams {
    const cam = this.state.camera;
    if ("preset" in cam) return this.svc.camera_presets[cam.preset];
    return cam;
  }

  private banner(msg: string): void {
    const bar = el<HTMLDivElement>("banner");
    bar.textContent = msg;
    bar.style.display = msg ? "block" : "none";
  }

  private requestRender(): void {
    this.scheduler.request(() => this.api.render(renderRequestOf(this.state)));
  }

  private applyRender(r: RenderResponse): void {
    this.last = r;
    const strip = el<HTMLCanvasElement>("strip");
    const ctx = strip.getContext("2d")!;
    const row = rgbRowToRgba(b64ToFloat64(r.image_b64));
    const img = new ImageData(row, r.width, 1);
    const off = new OffscreenCanvas(r.width, 1);
    off.getContext("2d")!.putImageData(img, 0, 0);
    ctx.imageSmoothingEnabled = false;
    ctx.clearRect(0, 0, strip.width, strip.height);
    ctx.drawImage(off, 0, 0, r.width, 1, 0, 0, strip.width, STRIP_H);

    const map = el<HTMLCanvasElement>("map");
    const mctx = map.getContext("2d")!;
    const g = r.density_res;
    const rgba = densityToRgba(b64ToFloat64(r.density_b64));
    const dimg = new ImageData(rgba, g, g);
    const doff = new OffscreenCanvas(g, g);
    doff.getContext("2d")!.putImageData(dimg, 0, 0);
    mctx.imageSmoothingEnabled = false;
    mctx.save();
    mctx.scale(1, -1); // world y grows up
    mctx.drawImage(doff, 0, 0, g, g, 0, -MAP_SIZE, MAP_SIZE, MAP_SIZE);
    mctx.restore();
    this.drawKeypoints(mctx);
    el<HTMLSpanElement>("warning").textContent = r.warning_extrapolation
      ? "extrapolating beyond trained positions"
      : "";
  }

  private drawKeypoints(ctx: CanvasRenderingContext2D): void {
    this.state.keypoints.forEach((p, i) => {
      const [mx, my] = worldToMap(p, this.svc.bounds_lo, this.svc.bounds_hi, MAP_SIZE);
      ctx.beginPath();
      ctx.arc(mx, my, i === this.state.selected ? 9 : 7, 0, Math.PI * 2);
      ctx.fillStyle = i === this.state.selected ? "#31d07c" : "#3f9cf0";
      ctx.strokeStyle = "#ffffff";
      ctx.lineWidth = 2;
      ctx.fill();
      ctx.stroke();
    });
  }

  private buildControls(): void {
    const map = el<HTMLCanvasElement>("map");
    map.width = MAP_SIZE;
    map.height = MAP_SIZE;
    const strip = el<HTMLCanvasElement>("strip");
    strip.width = 960;
    strip.height = STRIP_H;

    map.addEventListener("pointerdown", (e) => {
      const world = this.eventWorld(map, e);
      const idx = nearestKeypoint(this.state.keypoints, world, this.pickRadius());
      if (idx >= 0) {
        this.dragging = idx;
        this.state = { ...this.state, selected: idx };
        void this.seedDepthSlider();
        map.setPointerCapture(e.pointerId);
      }
    });
    map.addEventListener("pointermove", (e) => {
      if (this.dragging < 0) return;
      const world = this.eventWorld(map, e);
      // in-view drag: lateral follows the pointer, depth via the slider
      const cam = this.camera();
      const moved = dragInView(
        cam,
        this.state.keypoints[this.dragging],
        project(cam, world).u - project(cam, this.state.keypoints[this.dragging]).u,
      );
      this.state = moveKeypoint(this.state, this.dragging, moved);
      this.requestRender();
    });
    map.addEventListener("pointerup", () => (this.dragging = -1));

    const depth = el<HTMLInputElement>("depth");
    depth.addEventListener("input", () => {
      const i = this.state.selected;
      if (i < 0) return;
      const moved = setDepth(this.camera(), this.state.keypoints[i], Number(depth.value));
      this.state = moveKeypoint(this.state, i, moved);
      this.requestRender();
    });

    const frame = el<HTMLInputElement>("frame");
    frame.max = String(this.svc.frames - 1);
    frame.addEventListener("input", () => {
      const t = Number(frame.value);
      this.state = { ...this.state, baseFrame: t, camera: { preset: t } };
      void this.api.keypoints(t).then((kp) => {
        this.state = { ...this.state, keypoints: kp };
        this.requestRender();
      });
    });

    el<HTMLButtonElement>("record").addEventListener("click", () => {
      this.state = recordTrailEntry(this.state, this.state.trail.length);
      this.updateTrailUi();
    });
    el<HTMLButtonElement>("clear-trail").addEventListener("click", () => {
      this.state = clearTrail(this.state);
      this.videoFrames = [];
      this.updateTrailUi();
    });
    el<HTMLButtonElement>("export").addEventListener("click", () => {
      void this.exportVideo();
    });
    const scrub = el<HTMLInputElement>("scrub");
    scrub.addEventListener("input", () => this.showVideoFrame(Number(scrub.value)));

    el<HTMLButtonElement>("save").addEventListener("click", () => {
      localStorage.setItem("kpfield-session", saveSession(this.state));
    });
    el<HTMLButtonElement>("load").addEventListener("click", () => {
      const raw = localStorage.getItem("kpfield-session");
      if (raw) {
        this.state = loadSession(raw);
        this.updateTrailUi();
        this.requestRender();
      }
    });
    this.updateTrailUi();
  }

  private pickRadius(): number {
    const span = this.svc.bounds_hi[0] - this.svc.bounds_lo[0];
    return (20 / MAP_SIZE) * span;
  }

  private eventWorld(map: HTMLCanvasElement, e: PointerEvent): [number, number] {
    const rect = map.getBoundingClientRect();
    const mx = ((e.clientX - rect.left) / rect.width) * MAP_SIZE;
    const my = ((e.clientY - rect.top) / rect.height) * MAP_SIZE;
    return mapToWorld(mx, my, this.svc.bounds_lo, this.svc.bounds_hi, MAP_SIZE);
  }

  private async seedDepthSlider(): Promise<void> {
    const i = this.state.selected;
    if (i < 0) return;
    const cam = this.camera();
    const { u } = project(cam, this.state.keypoints[i]);
    const depth = el<HTMLInputElement>("depth");
    depth.min = String(this.svc.near);
    depth.max = String(this.svc.far);
    depth.step = "0.01";
    try {
      const seeded = await this.api.defaultDepth(u, this.state.camera);
      depth.value = String(seeded);
      el<HTMLSpanElement>("depth-value").textContent = seeded.toFixed(3);
    } catch {
      depth.value = String(distance(cam, this.state.keypoints[i]));
    }
  }

  private updateTrailUi(): void {
    el<HTMLSpanElement>("trail-count").textContent = String(this.state.trail.length);
    el<HTMLButtonElement>("export").disabled = this.state.trail.length < 2;
    el<HTMLInputElement>("scrub").max = String(Math.max(this.videoFrames.length - 1, 0));
  }

  private async exportVideo(): Promise<void> {
    if (this.state.trail.length < 2) return;
    const resp = await this.api.video({
      trail: this.state.trail,
      n_frames: 16,
      camera: this.state.camera,
      base_frame: this.state.baseFrame,
      seed: this.state.seed,
    });
    this.videoFrames = resp.frames.map(b64ToFloat64);
    this.updateTrailUi();
    this.showVideoFrame(0);
  }

  private showVideoFrame(i: number): void {
    const frame = this.videoFrames[i];
    if (!frame) return;
    const strip = el<HTMLCanvasElement>("video-strip");
    strip.width = 960;
    strip.height = STRIP_H;
    const ctx = strip.getContext("2d")!;
    const w = frame.length / 3;
    const img = new ImageData(rgbRowToRgba(frame), w, 1);
    const off = new OffscreenCanvas(w, 1);
    off.getContext("2d")!.putImageData(img, 0, 0);
    ctx.imageSmoothingEnabled = false;
    ctx.drawImage(off, 0, 0, w, 1, 0, 0, strip.width, STRIP_H);
  }
}

const url = new URLSearchParams(location.search).get("service") ?? "http://127.0.0.1:8787";
new EditorApp(url).start().catch((e) => {
  const bar = document.getElementById("banner")!;
  bar.textContent = `service unreachable: ${e}`;
  (bar as HTMLElement).style.display = "block";
});
