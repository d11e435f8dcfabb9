// Connection state machine: subscribes to the snapshot stream, keeps only
// the newest snapshot (stale frame indices are discarded), and reconnects
// with exponential backoff. The client never simulates locally; everything
// rendered comes from server snapshots.

import {
  ControlMessage, Hello, Snapshot, decodeBinarySnapshot, parseServerText,
} from "./protocol.js";

export type Status = "connecting" | "connected" | "disconnected";

export interface SceneState {
  hello: Hello | null;
  latest: Snapshot | null;
  status: Status;
  lastError: string;
  discarded: number; // stale snapshots dropped
}

export const BACKOFF_BASE_MS = 500;
export const BACKOFF_MAX_MS = 8000;

export function backoffDelay(attempt: number): number {
  return Math.min(BACKOFF_MAX_MS, BACKOFF_BASE_MS * 2 ** attempt);
}

/** Newest-wins snapshot slot; returns true when accepted. */
export function acceptSnapshot(state: SceneState, snap: Snapshot): boolean {
  const cur = state.latest;
  if (cur && snap.frame < cur.frame) {
    state.discarded += 1;
    return false;
  }
  state.latest = snap;
  return true;
}

interface WebSocketLike {
  onopen: ((ev: unknown) => void) | null;
  onclose: ((ev: unknown) => void) | null;
  onmessage: ((ev: { data: unknown }) => void) | null;
  binaryType: string;
  send(data: string): void;
  close(): void;
}

export class ServiceClient {
  state: SceneState = {
    hello: null, latest: null, status: "connecting", lastError: "", discarded: 0,
  };
  onHello: ((h: Hello) => void) | null = null;
  private sock: WebSocketLike | null = null;
  private attempt = 0;
  private closed = false;

  constructor(
    private url: string,
    private makeSocket: (url: string) => WebSocketLike =
      (u) => new WebSocket(u) as unknown as WebSocketLike,
    private schedule: (fn: () => void, ms: number) => void =
      (fn, ms) => setTimeout(fn, ms),
  ) {}

  connect(): void {
    this.state.status = "connecting";
    const sock = this.makeSocket(this.url);
    this.sock = sock;
    sock.binaryType = "arraybuffer";
    sock.onopen = () => {
      this.attempt = 0;
      this.state.status = "connected";
    };
    sock.onmessage = (ev) => this.handleMessage(ev.data);
    sock.onclose = () => {
      this.state.status = "disconnected";
      if (this.closed) return;
      const delay = backoffDelay(this.attempt);
      this.attempt += 1;
      this.schedule(() => this.connect(), delay);
    };
  }

  handleMessage(data: unknown): void {
    if (typeof data === "string") {
      const msg = parseServerText(data);
      switch (msg.kind) {
        case "hello":
          this.state.hello = msg.hello;
          this.state.latest = null;
          this.onHello?.(msg.hello);
          break;
        case "snapshot":
          acceptSnapshot(this.state, msg.snapshot);
          break;
        case "error":
          this.state.lastError = msg.error;
          break;
        case "ack":
          break;
      }
    } else if (data instanceof ArrayBuffer) {
      acceptSnapshot(this.state, decodeBinarySnapshot(data));
    }
  }

  send(msg: ControlMessage): boolean {
    if (this.state.status !== "connected" || !this.sock) {
      return false; // inputs while disconnected are dropped
    }
    this.sock.send(JSON.stringify(msg));
    return true;
  }

  close(): void {
    this.closed = true;
    this.sock?.close();
  }
}
