// Wire protocol shared with the simulation service. All JSON frames carry a
// "v" field; snapshots switch to a compact binary framing on large scenes
// (layout: 'SNP1' | u32 frame | f32 t | u8 paused | u32 nNodes | u32 nCtrl |
// positions f32 xyz * nNodes | control f32 xyz * nCtrl, little-endian).

export const PROTOCOL_VERSION = 1;

export interface Hello {
  type: "hello";
  n_nodes: number;
  n_ctrl: number;
  n_springs: number;
  springs: [number, number][];
  tick_rate: number;
  ground_height: number;
  binary: boolean;
}

export interface Snapshot {
  frame: number;
  t: number;
  paused: boolean;
  positions: Float32Array; // xyz interleaved, length 3 * nNodes
  control: Float32Array;   // xyz interleaved, length 3 * nCtrl
  skinCenters?: Float32Array;
  skinColors?: Float32Array;
}

export type ServerMessage =
  | { kind: "hello"; hello: Hello }
  | { kind: "snapshot"; snapshot: Snapshot }
  | { kind: "ack"; appliesAtFrame: number }
  | { kind: "error"; error: string };

export type ControlMessage =
  | { v: number; type: "drag"; index: number; delta: [number, number, number] }
  | { v: number; type: "set"; index: number; position: [number, number, number] }
  | { v: number; type: "pause" }
  | { v: number; type: "resume" }
  | { v: number; type: "reset" };

export function dragMessage(index: number, delta: [number, number, number]): ControlMessage {
  return { v: PROTOCOL_VERSION, type: "drag", index, delta };
}

export function simpleMessage(type: "pause" | "resume" | "reset"): ControlMessage {
  return { v: PROTOCOL_VERSION, type };
}

function flatten(triples: number[][]): Float32Array {
  const out = new Float32Array(triples.length * 3);
  for (let i = 0; i < triples.length; i++) {
    out[3 * i] = triples[i][0];
    out[3 * i + 1] = triples[i][1];
    out[3 * i + 2] = triples[i][2];
  }
  return out;
}

export function parseServerText(raw: string): ServerMessage {
  const msg = JSON.parse(raw);
  switch (msg.type) {
    case "hello":
      return { kind: "hello", hello: msg as Hello };
    case "snapshot": {
      const snapshot: Snapshot = {
        frame: msg.frame,
        t: msg.t,
        paused: !!msg.paused,
        positions: flatten(msg.positions),
        control: flatten(msg.control),
      };
      if (msg.skin) {
        snapshot.skinCenters = flatten(msg.skin.centers);
        snapshot.skinColors = flatten(msg.skin.colors);
      }
      return { kind: "snapshot", snapshot };
    }
    case "ack":
      return { kind: "ack", appliesAtFrame: msg.applies_at_frame };
    case "error":
      return { kind: "error", error: String(msg.error) };
    default:
      return { kind: "error", error: `unknown server message type ${msg.type}` };
  }
}

const BINARY_MAGIC = 0x31504e53; // 'SNP1' little-endian

export function decodeBinarySnapshot(buf: ArrayBuffer): Snapshot {
  const view = new DataView(buf);
  if (view.getUint32(0, true) !== BINARY_MAGIC) {
    throw new Error("bad snapshot magic");
  }
  const frame = view.getUint32(4, true);
  const t = view.getFloat32(8, true);
  const paused = view.getUint8(12) !== 0;
  const nNodes = view.getUint32(13, true);
  const nCtrl = view.getUint32(17, true);
  let off = 21;
  // the payload follows an unaligned 21-byte header: copy via slice
  const positions = new Float32Array(buf.slice(off, off + 12 * nNodes));
  off += 12 * nNodes;
  const control = new Float32Array(buf.slice(off, off + 12 * nCtrl));
  return { frame, t, paused, positions, control };
}
