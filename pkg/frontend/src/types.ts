/**
 * Wire types for the console API.
 *
 * Everything here mirrors what the HMI service actually sends; the console
 * never invents values of its own. GET /api/state returns a Snapshot,
 * the /api/stream WebSocket sends a hello carrying one and then deltas.
 */

export type BreakerState = "open" | "closed" | "unknown";

export interface RtuState {
  /** Amps, already scaled; null while no good poll has arrived. */
  current: number | null;
  /** Kilovolts; null while no good poll has arrived. */
  voltage: number | null;
  breaker: BreakerState;
  /** Seconds since the last fully answered poll, null if never. */
  stale_for?: number | null;
}

export interface Snapshot {
  t: number;
  rtus: Record<string, RtuState>;
}

export interface HelloEvent {
  type: "hello";
  state: Snapshot;
}

export interface ViewEvent {
  type: "view";
  t: number;
  rtu: string;
  current: number | null;
  voltage: number | null;
  breaker: BreakerState;
}

export interface CommandResultEvent {
  type: "command_result";
  t: number;
  rtu: string;
  action: string;
  origin: string;
  status: string;
  reason?: string;
}

export type StreamEvent = HelloEvent | ViewEvent | CommandResultEvent;

export interface CommandOutcome {
  status: "confirmed" | "rejected" | "failed" | "busy";
  reason?: string;
}
