/**
 * Command path: one confirmed click becomes exactly one POST /api/command.
 *
 * The controller is deliberately pessimistic: it never touches the panel
 * model. Breaker glyphs change only when a later polled state arrives on
 * the stream, so the operator sees the system as reported, not as
 * commanded. At most one command is in flight at a time.
 */

import { CommandOutcome } from "./types.js";

export interface PostResponse {
  status: number;
  body: { status?: string; reason?: string };
}

export type PostFn = (path: string, body: unknown) => Promise<PostResponse>;

export class CommandController {
  private pending = false;

  constructor(private post: PostFn) {}

  get busy(): boolean {
    return this.pending;
  }

  async send(rtu: string, action: "open" | "close"): Promise<CommandOutcome> {
    if (this.pending) {
      return { status: "busy", reason: "a command is already in flight" };
    }
    this.pending = true;
    try {
      const res = await this.post("/api/command", { rtu, action, origin: "console" });
      const status = res.body?.status;
      if (status === "confirmed" || status === "rejected" || status === "failed") {
        return { status, reason: res.body.reason };
      }
      return { status: "failed", reason: `unexpected response (${res.status})` };
    } catch (err) {
      return { status: "failed", reason: String(err) };
    } finally {
      this.pending = false;
    }
  }
}
