/** Flatland camera math mirrored from the service: theta=0 looks along +y,
 * u = f * lateral/forward + c with integer pixel centers. */

export interface CameraParams {
  o: number[];
  orientation: number;
  f: number;
  c: number;
}

export function forwardAxis(cam: CameraParams): [number, number] {
  return [-Math.sin(cam.orientation), Math.cos(cam.orientation)];
}

export function lateralAxis(cam: CameraParams): [number, number] {
  return [Math.cos(cam.orientation), Math.sin(cam.orientation)];
}

export function project(cam: CameraParams, p: number[]): { u: number; inFront: boolean } {
  const rx = p[0] - cam.o[0];
  const ry = p[1] - cam.o[1];
  const fwd = forwardAxis(cam);
  const lat = lateralAxis(cam);
  const z = rx * fwd[0] + ry * fwd[1];
  const x = rx * lat[0] + ry * lat[1];
  return { u: (cam.f * x) / z + cam.c, inFront: z > 0 };
}

export function unproject(cam: CameraParams, u: number, dist: number): [number, number] {
  const dx = (u - cam.c) / cam.f;
  const fwd = forwardAxis(cam);
  const lat = lateralAxis(cam);
  let vx = dx * lat[0] + fwd[0];
  let vy = dx * lat[1] + fwd[1];
  const n = Math.hypot(vx, vy);
  vx /= n;
  vy /= n;
  return [cam.o[0] + dist * vx, cam.o[1] + dist * vy];
}

export function distance(cam: CameraParams, p: number[]): number {
  return Math.hypot(p[0] - cam.o[0], p[1] - cam.o[1]);
}

/** Move a world point so its projection shifts by du pixels while its
 * camera distance stays fixed (the in-view part of a drag). */
export function dragInView(cam: CameraParams, p: number[], du: number): [number, number] {
  const { u } = project(cam, p);
  return unproject(cam, u + du, distance(cam, p));
}

/** Re-seat a world point at a new camera distance along its current ray
 * (the depth-slider part of a drag). */
export function setDepth(cam: CameraParams, p: number[], dist: number): [number, number] {
  const { u } = project(cam, p);
  return unproject(cam, u, dist);
}

/** Map world position to density-map canvas pixels (top-down view). */
export function worldToMap(
  p: number[],
  boundsLo: number[],
  boundsHi: number[],
  mapSize: number,
): [number, number] {
  const mx = ((p[0] - boundsLo[0]) / (boundsHi[0] - boundsLo[0])) * mapSize;
  const my = ((p[1] - boundsLo[1]) / (boundsHi[1] - boundsLo[1])) * mapSize;
  return [mx, mapSize - my]; // canvas y grows downward
}

export function mapToWorld(
  mx: number,
  my: number,
  boundsLo: number[],
  boundsHi: number[],
  mapSize: number,
): [number, number] {
  const x = boundsLo[0] + (mx / mapSize) * (boundsHi[0] - boundsLo[0]);
  const y = boundsLo[1] + ((mapSize - my) / mapSize) * (boundsHi[1] - boundsLo[1]);
  return [x, y];
}

export function nearestKeypoint(
  points: number[][],
  target: [number, number],
  maxDist: number,
): number {
  let best = -1;
  let bestD = maxDist;
  points.forEach((p, i) => {
    const d = Math.hypot(p[0] - target[0], p[1] - target[1]);
    if (d <= bestD) {
      best = i;
      bestD = d;
    }
  });
  return best;
}
