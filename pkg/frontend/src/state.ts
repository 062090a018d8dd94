/** Editor state: current camera, key points, selection, trail buffer.
 * Sessions round-trip through JSON exactly. */

import type { CameraSpec, RenderRequest, ServiceState } from "./api.js";

export interface TrailEntry {
  time: number;
  keypoints: number[][];
}

export interface EditorState {
  baseFrame: number;
  seed: number;
  samples?: number;
  camera: CameraSpec;
  keypoints: number[][];
  selected: number;
  trail: TrailEntry[];
}

export function initialState(svc: ServiceState): EditorState {
  return {
    baseFrame: svc.base_frame,
    seed: 0,
    camera: { preset: svc.base_frame },
    keypoints: svc.keypoints.map((p) => [...p]),
    selected: svc.n_keypoints > 0 ? 0 : -1,
    trail: [],
  };
}

export function renderRequestOf(state: EditorState): RenderRequest {
  const req: RenderRequest = {
    camera: state.camera,
    keypoints: state.keypoints.map((p) => [...p]),
    base_frame: state.baseFrame,
    seed: state.seed,
  };
  if (state.samples !== undefined) req.samples = state.samples;
  return req;
}

export function moveKeypoint(
  state: EditorState,
  index: number,
  pos: number[],
): EditorState {
  const keypoints = state.keypoints.map((p, i) => (i === index ? [...pos] : [...p]));
  return { ...state, keypoints };
}

export function recordTrailEntry(state: EditorState, time: number): EditorState {
  const entry = { time, keypoints: state.keypoints.map((p) => [...p]) };
  return { ...state, trail: [...state.trail, entry] };
}

export function clearTrail(state: EditorState): EditorState {
  return { ...state, trail: [] };
}

export function saveSession(state: EditorState): string {
  return JSON.stringify(state);
}

export function loadSession(json: string): EditorState {
  const parsed = JSON.parse(json) as EditorState;
  if (!Array.isArray(parsed.keypoints) || typeof parsed.baseFrame !== "number") {
    throw new Error("not an editor session");
  }
  return parsed;
}
