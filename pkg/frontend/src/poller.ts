/**
 * Repeating fetch loop with stale-data tracking. On a failed poll the last
 * good snapshot is kept and marked stale; nothing is ever fabricated.
 */

export interface PollState<T> {
  data: T | null;
  stale: boolean;
  lastError: string | null;
  lastSuccessAt: number | null;
}

export class Poller<T> {
  private state: PollState<T> = {
    data: null,
    stale: false,
    lastError: null,
    lastSuccessAt: null,
  };
  private timer: ReturnType<typeof setInterval> | null = null;

  constructor(
    private readonly fetchFn: () => Promise<T>,
    private readonly onUpdate: (state: PollState<T>) => void,
    private readonly intervalMs = 3000,
  ) {}

  snapshot(): PollState<T> {
    return { ...this.state };
  }

  /** Runs one poll cycle and reports the resulting state. */
  async tick(): Promise<PollState<T>> {
    try {
      const data = await this.fetchFn();
      this.state = { data, stale: false, lastError: null, lastSuccessAt: Date.now() };
    } catch (err) {
      this.state = {
        ...this.state,
        stale: this.state.data !== null,
        lastError: err instanceof Error ? err.message : String(err),
      };
    }
    this.onUpdate(this.snapshot());
    return this.snapshot();
  }

  start(): void {
    if (this.timer !== null) return;
    void this.tick();
    this.timer = setInterval(() => void this.tick(), this.intervalMs);
  }

  stop(): void {
    if (this.timer !== null) {
      clearInterval(this.timer);
      this.timer = null;
    }
  }
}
