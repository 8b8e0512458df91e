/**
 * Stream client: keeps a snapshot in sync with the /api/stream WebSocket.
 *
 * The hello message replaces the snapshot, view deltas merge into it, and
 * command acknowledgements are handed to the caller. Connection loss flips
 * a stale flag (so the UI can grey out and show a banner) and triggers a
 * reconnect after a short delay.
 */

import { applyView } from "./panel.js";
import { Snapshot, StreamEvent } from "./types.js";

/** The subset of WebSocket the client needs; tests inject a fake. */
export interface SocketLike {
  onopen: ((ev: any) => void) | null;
  onmessage: ((ev: any) => void) | null;
  onclose: ((ev: any) => void) | null;
  close(): void;
}

export interface StreamHandlers {
  /** Called with the fresh snapshot after every applied change. */
  onSnapshot(snapshot: Snapshot): void;
  onCommandResult(event: { rtu: string; action: string; status: string; reason?: string }): void;
  onConnection(connected: boolean): void;
}

export const RECONNECT_DELAY_MS = 2000;

export class StreamClient {
  snapshot: Snapshot = { t: 0, rtus: {} };
  connected = false;
  private socket: SocketLike | null = null;
  private timer: ReturnType<typeof setTimeout> | null = null;
  private stopped = false;

  constructor(
    private makeSocket: () => SocketLike,
    private handlers: StreamHandlers,
  ) {}

  start(): void {
    this.stopped = false;
    this.connect();
  }

  stop(): void {
    this.stopped = true;
    if (this.timer !== null) {
      clearTimeout(this.timer);
      this.timer = null;
    }
    this.socket?.close();
    this.socket = null;
  }

  private connect(): void {
    const socket = this.makeSocket();
    this.socket = socket;
    socket.onopen = () => {
      this.connected = true;
      this.handlers.onConnection(true);
    };
    socket.onmessage = (ev: { data: string }) => this.handleMessage(ev.data);
    socket.onclose = () => {
      const wasConnected = this.connected;
      this.connected = false;
      if (wasConnected) {
        this.handlers.onConnection(false);
      }
      if (!this.stopped) {
        this.timer = setTimeout(() => this.connect(), RECONNECT_DELAY_MS);
      }
    };
  }

  handleMessage(data: string): void {
    let event: StreamEvent;
    try {
      event = JSON.parse(data);
    } catch {
      return; // not ours to interpret
    }
    if (event.type === "hello") {
      this.snapshot = event.state;
      this.handlers.onSnapshot(this.snapshot);
    } else if (event.type === "view") {
      this.snapshot = applyView(this.snapshot, event);
      this.handlers.onSnapshot(this.snapshot);
    } else if (event.type === "command_result") {
      this.handlers.onCommandResult(event);
    }
  }
}
