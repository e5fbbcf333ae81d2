/**
 * Wire protocol codec for the score-predictor bridge.
 *
 * Every message is one length-prefixed frame:
 *
 *     magic   4 bytes   "SNP1"
 *     kind    u8        message kind
 *     length  u32 LE    payload byte count
 *     payload
 *
 * Tensors are serialized as u32 rank, u32 dims[rank], then float32 data
 * little-endian in C order. All scalar fields are little-endian.
 *
 * Payload layouts (matching the engine side):
 *
 *     NOISE_QUERY (1)
 *         u32 viewId | u32 timestep | u8 mode | u8 nHook |
 *         u32 hookLayer * nHook | u32 promptLen | prompt utf8 |
 *         u8 hasCond | tensor latent | [tensor condImage]
 *     NOISE_REPLY (2)
 *         tensor eps | u32 nFeatures | (u32 layerId | tensor) * n
 *     FEATURE_INJECT_QUERY (3)
 *         NOISE_QUERY payload, then u32 nInjected | (u32 layerId | tensor) * n
 *     DECODE_QUERY (4)   u32 viewId | tensor latent
 *     DECODE_REPLY (5)   tensor image
 *     ERROR (6)          u32 code | u32 messageLen | message utf8
 *     SCHEDULER_STEP (7) u32 timestep | u32 timestepNext | tensor latent | tensor eps
 *     SCHEDULER_REPLY (8) tensor latent
 */

export const MAGIC = Buffer.from("SNP1", "ascii");
export const HEADER_SIZE = 9;
export const MAX_PAYLOAD = 1 << 30;

export enum MessageKind {
  NoiseQuery = 1,
  NoiseReply = 2,
  FeatureInjectQuery = 3,
  DecodeQuery = 4,
  DecodeReply = 5,
  Error = 6,
  SchedulerStep = 7,
  SchedulerReply = 8,
}

export enum ErrorCode {
  BadMagic = 1,
  BadMessage = 2,
  ModelFailure = 3,
  ShapeMismatch = 4,
}

export enum ConditioningMode {
  Uncond = 0,
  Image = 1,
  ImageText = 2,
}

export interface Tensor {
  dims: number[];
  data: Float32Array;
}

export interface NoiseRequest {
  viewId: number;
  timestep: number;
  mode: ConditioningMode;
  hookLayers: number[];
  prompt: string;
  latent: Tensor;
  condImage?: Tensor;
  injectedFeatures: Map<number, Tensor>;
}

export interface NoiseResponse {
  eps: Tensor;
  features: Map<number, Tensor>;
}

export class ProtocolError extends Error {
  constructor(message: string, readonly code: ErrorCode = ErrorCode.BadMessage) {
    super(message);
    this.name = "ProtocolError";
  }
}

export function tensorElementCount(dims: number[]): number {
  return dims.reduce((a, b) => a * b, 1);
}

export function makeTensor(dims: number[], fill = 0): Tensor {
  const data = new Float32Array(tensorElementCount(dims));
  if (fill !== 0) data.fill(fill);
  return { dims: [...dims], data };
}

/** Sequential reader over a payload buffer with bounds checking. */
export class PayloadReader {
  private pos = 0;

  constructor(private readonly buf: Buffer) {}

  private need(n: number): void {
    if (this.pos + n > this.buf.length) {
      throw new ProtocolError(
        `truncated payload: wanted ${n} bytes at offset ${this.pos}, have ${this.buf.length}`,
      );
    }
  }

  u8(): number {
    this.need(1);
    return this.buf.readUInt8(this.pos++);
  }

  u32(): number {
    this.need(4);
    const v = this.buf.readUInt32LE(this.pos);
    this.pos += 4;
    return v;
  }

  bytes(n: number): Buffer {
    this.need(n);
    const out = this.buf.subarray(this.pos, this.pos + n);
    this.pos += n;
    return out;
  }

  tensor(): Tensor {
    const rank = this.u32();
    if (rank > 8) throw new ProtocolError(`tensor rank ${rank} out of range`);
    const dims: number[] = [];
    for (let i = 0; i < rank; i++) dims.push(this.u32());
    const count = tensorElementCount(dims);
    const raw = this.bytes(count * 4);
    // copy out of the frame buffer; alignment of subarray is not guaranteed
    const data = new Float32Array(count);
    for (let i = 0; i < count; i++) data[i] = raw.readFloatLE(i * 4);
    return { dims, data };
  }

  done(): void {
    if (this.pos !== this.buf.length) {
      throw new ProtocolError(`${this.buf.length - this.pos} trailing payload bytes`);
    }
  }
}

export function encodeTensor(tensor: Tensor): Buffer {
  const count = tensorElementCount(tensor.dims);
  if (tensor.data.length !== count) {
    throw new ProtocolError(
      `tensor data length ${tensor.data.length} does not match dims ${tensor.dims}`,
      ErrorCode.ShapeMismatch,
    );
  }
  const head = Buffer.alloc(4 + 4 * tensor.dims.length);
  head.writeUInt32LE(tensor.dims.length, 0);
  tensor.dims.forEach((d, i) => head.writeUInt32LE(d, 4 + 4 * i));
  const body = Buffer.alloc(count * 4);
  for (let i = 0; i < count; i++) body.writeFloatLE(tensor.data[i], i * 4);
  return Buffer.concat([head, body]);
}

export function decodeTensor(payload: Buffer): Tensor {
  const reader = new PayloadReader(payload);
  const t = reader.tensor();
  reader.done();
  return t;
}

export function decodeRequest(kind: MessageKind, payload: Buffer): NoiseRequest {
  const r = new PayloadReader(payload);
  const viewId = r.u32();
  const timestep = r.u32();
  const mode = r.u8() as ConditioningMode;
  const nHook = r.u8();
  const hookLayers: number[] = [];
  for (let i = 0; i < nHook; i++) hookLayers.push(r.u32());
  const prompt = r.bytes(r.u32()).toString("utf8");
  const hasCond = r.u8();
  const latent = r.tensor();
  const condImage = hasCond ? r.tensor() : undefined;
  const injectedFeatures = new Map<number, Tensor>();
  if (kind === MessageKind.FeatureInjectQuery) {
    const n = r.u32();
    for (let i = 0; i < n; i++) {
      const layer = r.u32();
      injectedFeatures.set(layer, r.tensor());
    }
  }
  r.done();
  return { viewId, timestep, mode, hookLayers, prompt, latent, condImage, injectedFeatures };
}

export function encodeResponse(response: NoiseResponse): Buffer {
  const parts: Buffer[] = [encodeTensor(response.eps)];
  const count = Buffer.alloc(4);
  count.writeUInt32LE(response.features.size, 0);
  parts.push(count);
  for (const layer of [...response.features.keys()].sort((a, b) => a - b)) {
    const id = Buffer.alloc(4);
    id.writeUInt32LE(layer, 0);
    parts.push(id, encodeTensor(response.features.get(layer)!));
  }
  return Buffer.concat(parts);
}

export function encodeError(code: ErrorCode, message: string): Buffer {
  const text = Buffer.from(message, "utf8");
  const out = Buffer.alloc(8 + text.length);
  out.writeUInt32LE(code, 0);
  out.writeUInt32LE(text.length, 4);
  text.copy(out, 8);
  return out;
}

export function decodeError(payload: Buffer): { code: number; message: string } {
  const r = new PayloadReader(payload);
  const code = r.u32();
  const message = r.bytes(r.u32()).toString("utf8");
  r.done();
  return { code, message };
}

export function encodeFrame(kind: MessageKind, payload: Buffer): Buffer {
  const head = Buffer.alloc(HEADER_SIZE);
  MAGIC.copy(head, 0);
  head.writeUInt8(kind, 4);
  head.writeUInt32LE(payload.length, 5);
  return Buffer.concat([head, payload]);
}

export interface Frame {
  kind: MessageKind;
  payload: Buffer;
}

/**
 * Incremental frame parser with bad-magic resynchronization.
 *
 * Feed received chunks with push(); complete frames come back in order. A
 * frame whose magic does not match produces one onBadMagic() callback and
 * the stream is scanned forward to the next magic occurrence.
 */
export class FrameParser {
  private buffer: Buffer = Buffer.alloc(0);
  private inResync = false;

  constructor(private readonly onBadMagic?: () => void) {}

  push(chunk: Buffer): Frame[] {
    this.buffer = this.buffer.length ? Buffer.concat([this.buffer, chunk]) : chunk;
    const frames: Frame[] = [];
    for (;;) {
      if (this.buffer.length < HEADER_SIZE) return frames;
      if (!this.buffer.subarray(0, 4).equals(MAGIC)) {
        if (!this.inResync) {
          this.inResync = true;
          this.onBadMagic?.();
        }
        const idx = this.buffer.indexOf(MAGIC, 1);
        if (idx < 0) {
          this.buffer = this.buffer.subarray(Math.max(0, this.buffer.length - 3));
          return frames;
        }
        this.buffer = this.buffer.subarray(idx);
        continue;
      }
      this.inResync = false;
      const kind = this.buffer.readUInt8(4) as MessageKind;
      const length = this.buffer.readUInt32LE(5);
      if (length > MAX_PAYLOAD) {
        throw new ProtocolError(`payload length ${length} exceeds limit`);
      }
      if (this.buffer.length < HEADER_SIZE + length) return frames;
      const payload = Buffer.from(this.buffer.subarray(HEADER_SIZE, HEADER_SIZE + length));
      this.buffer = this.buffer.subarray(HEADER_SIZE + length);
      frames.push({ kind, payload });
    }
  }
}
