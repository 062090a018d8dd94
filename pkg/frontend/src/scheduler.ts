/** Debounced render scheduling with stale-response rejection.
 *
 * During a drag, requests are collapsed to one per debounce window and at
 * most one render is in flight; responses superseded by a newer request id
 * are dropped instead of flashing stale frames.
 */

export class RenderScheduler<T> {
  private timer: ReturnType<typeof setTimeout> | null = null;
  private nextId = 0;
  private appliedId = 0;
  private inFlight = false;
  private pending: (() => Promise<T>) | null = null;

  constructor(
    private debounceMs: number,
    private onResult: (result: T) => void,
    private onError: (err: unknown) => void = () => {},
  ) {}

  request(run: () => Promise<T>): void {
    this.pending = run;
    if (this.timer !== null) clearTimeout(this.timer);
    this.timer = setTimeout(() => {
      this.timer = null;
      void this.flush();
    }, this.debounceMs);
  }

  /** Issue immediately (used by tests and non-drag actions). */
  async flush(): Promise<void> {
    if (this.pending === null || this.inFlight) return;
    const run = this.pending;
    this.pending = null;
    const id = ++this.nextId;
    this.inFlight = true;
    try {
      const result = await run();
      if (id > this.appliedId) {
        this.appliedId = id;
        this.onResult(result);
      }
    } catch (err) {
      this.onError(err);
    } finally {
      this.inFlight = false;
      if (this.pending !== null) void this.flush();
    }
  }
}
