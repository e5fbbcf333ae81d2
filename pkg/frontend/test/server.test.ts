import net from "node:net";
import os from "node:os";
import path from "node:path";

import { afterEach, describe, expect, it } from "vitest";

import { EchoBackend, createBackend } from "../src/backend.js";
import {
  ConditioningMode,
  ErrorCode,
  Frame,
  FrameParser,
  MessageKind,
  ProtocolError,
  decodeError,
  decodeTensor,
  encodeFrame,
  encodeTensor,
  makeTensor,
  NoiseRequest,
  Tensor,
} from "../src/protocol.js";
import { BridgeServer, parseEndpoint, serve } from "../src/server.js";

let bridge: BridgeServer | undefined;
let client: net.Socket | undefined;

afterEach(async () => {
  client?.destroy();
  client = undefined;
  await bridge?.close();
  bridge = undefined;
});

function encodeRequestBuffer(request: NoiseRequest, inject = false): Buffer {
  const prompt = Buffer.from(request.prompt, "utf8");
  const head = Buffer.alloc(10 + 4 * request.hookLayers.length + 4);
  head.writeUInt32LE(request.viewId, 0);
  head.writeUInt32LE(request.timestep, 4);
  head.writeUInt8(request.mode, 8);
  head.writeUInt8(request.hookLayers.length, 9);
  request.hookLayers.forEach((l, i) => head.writeUInt32LE(l, 10 + 4 * i));
  head.writeUInt32LE(prompt.length, 10 + 4 * request.hookLayers.length);
  const parts = [head, prompt, Buffer.from([request.condImage ? 1 : 0]), encodeTensor(request.latent)];
  if (request.condImage) parts.push(encodeTensor(request.condImage));
  if (inject) {
    const count = Buffer.alloc(4);
    count.writeUInt32LE(request.injectedFeatures.size, 0);
    parts.push(count);
    for (const [layer, tensor] of [...request.injectedFeatures.entries()].sort((a, b) => a[0] - b[0])) {
      const id = Buffer.alloc(4);
      id.writeUInt32LE(layer, 0);
      parts.push(id, encodeTensor(tensor));
    }
    return encodeFrame(MessageKind.FeatureInjectQuery, Buffer.concat(parts));
  }
  return encodeFrame(MessageKind.NoiseQuery, Buffer.concat(parts));
}

function decodeNoiseReply(payload: Buffer): { eps: Tensor; features: Map<number, Tensor> } {
  // eps tensor, then (layer, tensor) pairs
  const rank = payload.readUInt32LE(0);
  const dims: number[] = [];
  for (let i = 0; i < rank; i++) dims.push(payload.readUInt32LE(4 + 4 * i));
  const count = dims.reduce((a, b) => a * b, 1);
  let offset = 4 + 4 * rank;
  const eps = makeTensor(dims);
  for (let i = 0; i < count; i++) eps.data[i] = payload.readFloatLE(offset + 4 * i);
  offset += 4 * count;
  const nFeatures = payload.readUInt32LE(offset);
  offset += 4;
  const features = new Map<number, Tensor>();
  for (let f = 0; f < nFeatures; f++) {
    const layer = payload.readUInt32LE(offset);
    offset += 4;
    const fRank = payload.readUInt32LE(offset);
    const fDims: number[] = [];
    for (let i = 0; i < fRank; i++) fDims.push(payload.readUInt32LE(offset + 4 + 4 * i));
    offset += 4 + 4 * fRank;
    const fCount = fDims.reduce((a, b) => a * b, 1);
    const tensor = makeTensor(fDims);
    for (let i = 0; i < fCount; i++) tensor.data[i] = payload.readFloatLE(offset + 4 * i);
    offset += 4 * fCount;
    features.set(layer, tensor);
  }
  return { eps, features };
}

async function startEcho(): Promise<string> {
  const sock = path.join(os.tmpdir(), `bridge-${process.pid}-${Math.random().toString(16).slice(2)}.sock`);
  bridge = await serve(new EchoBackend([5, 8]), parseEndpoint(`unix:${sock}`));
  return sock;
}

function connect(sockPath: string): Promise<net.Socket> {
  return new Promise((resolve, reject) => {
    const socket = net.createConnection(sockPath);
    socket.once("connect", () => resolve(socket));
    socket.once("error", reject);
  });
}

function collectFrames(socket: net.Socket, expected: number): Promise<Frame[]> {
  return new Promise((resolve, reject) => {
    const parser = new FrameParser();
    const frames: Frame[] = [];
    const timer = setTimeout(() => reject(new Error("timed out waiting for frames")), 5000);
    socket.on("data", (chunk: Buffer) => {
      frames.push(...parser.push(chunk));
      if (frames.length >= expected) {
        clearTimeout(timer);
        resolve(frames);
      }
    });
  });
}

function randomLatent(seed: number): Tensor {
  const tensor = makeTensor([4, 6, 6]);
  let state = seed;
  for (let i = 0; i < tensor.data.length; i++) {
    state = (state * 1103515245 + 12345) & 0x7fffffff;
    tensor.data[i] = Math.fround(state / 0x7fffffff - 0.5);
  }
  return tensor;
}

describe("echo server", () => {
  it("answers noise queries with zero eps and zero features of matching shape", async () => {
    const sock = await startEcho();
    client = await connect(sock);
    const latent = randomLatent(7);
    const reply = collectFrames(client, 1);
    client.write(
      encodeRequestBuffer({
        viewId: 3,
        timestep: 500,
        mode: ConditioningMode.Uncond,
        hookLayers: [5, 8],
        prompt: "",
        latent,
        injectedFeatures: new Map(),
      }),
    );
    const [frame] = await reply;
    expect(frame.kind).toBe(MessageKind.NoiseReply);
    const { eps, features } = decodeNoiseReply(frame.payload);
    expect(eps.dims).toEqual(latent.dims);
    expect([...eps.data].every((v) => v === 0)).toBe(true);
    expect([...features.keys()].sort()).toEqual([5, 8]);
    for (const tensor of features.values()) {
      expect(tensor.dims).toEqual(latent.dims);
    }
  });

  it("replace-with-self injection reproduces the uninjected noise within 1e-5", async () => {
    const sock = await startEcho();
    client = await connect(sock);
    const latent = randomLatent(11);
    const cond = makeTensor([3, 12, 12], 0.5);
    const base: NoiseRequest = {
      viewId: 1,
      timestep: 750,
      mode: ConditioningMode.ImageText,
      hookLayers: [5, 8],
      prompt: "test edit",
      latent,
      condImage: cond,
      injectedFeatures: new Map(),
    };
    const replies = collectFrames(client, 2);
    client.write(encodeRequestBuffer(base));
    // capture features, re-query with them injected
    const frames = await new Promise<Frame[]>((resolve) => {
      const done: Frame[] = [];
      const parser = new FrameParser();
      client!.on("data", function capture(chunk: Buffer) {
        done.push(...parser.push(chunk));
        if (done.length === 1) {
          const { features } = decodeNoiseReply(done[0].payload);
          client!.write(encodeRequestBuffer({ ...base, injectedFeatures: features }, true));
        }
        if (done.length === 2) {
          client!.removeListener("data", capture);
          resolve(done);
        }
      });
    });
    await replies.catch(() => undefined);
    const first = decodeNoiseReply(frames[0].payload);
    const second = decodeNoiseReply(frames[1].payload);
    let meanAbs = 0;
    for (let i = 0; i < first.eps.data.length; i++) {
      meanAbs += Math.abs(first.eps.data[i] - second.eps.data[i]);
    }
    meanAbs /= first.eps.data.length;
    expect(meanAbs).toBeLessThan(1e-5);
  });

  it("rejects shape-incompatible injected features", async () => {
    const sock = await startEcho();
    client = await connect(sock);
    const latent = randomLatent(3);
    const wrong = makeTensor([4, 3, 3], 1);
    const reply = collectFrames(client, 1);
    client.write(
      encodeRequestBuffer(
        {
          viewId: 1,
          timestep: 900,
          mode: ConditioningMode.Uncond,
          hookLayers: [],
          prompt: "",
          latent,
          injectedFeatures: new Map([[5, wrong]]),
        },
        true,
      ),
    );
    const [frame] = await reply;
    expect(frame.kind).toBe(MessageKind.Error);
    expect(decodeError(frame.payload).code).toBe(ErrorCode.ShapeMismatch);
  });

  it("answers ERROR to bad magic and stays alive", async () => {
    const sock = await startEcho();
    client = await connect(sock);
    const replies = collectFrames(client, 2);
    client.write(Buffer.from("NOPEnope!"));
    client.write(
      encodeRequestBuffer({
        viewId: 0,
        timestep: 10,
        mode: ConditioningMode.Uncond,
        hookLayers: [],
        prompt: "",
        latent: makeTensor([1, 2, 2], 0.1),
        injectedFeatures: new Map(),
      }),
    );
    const frames = await replies;
    expect(frames[0].kind).toBe(MessageKind.Error);
    expect(decodeError(frames[0].payload).message).toContain("magic");
    expect(frames[1].kind).toBe(MessageKind.NoiseReply);
  });

  it("serves decode queries", async () => {
    const sock = await startEcho();
    client = await connect(sock);
    const latent = makeTensor([3, 4, 4], 0.75);
    const head = Buffer.alloc(4);
    head.writeUInt32LE(2, 0);
    const reply = collectFrames(client, 1);
    client.write(encodeFrame(MessageKind.DecodeQuery, Buffer.concat([head, encodeTensor(latent)])));
    const [frame] = await reply;
    expect(frame.kind).toBe(MessageKind.DecodeReply);
    const image = decodeTensor(frame.payload);
    expect(image.dims).toEqual([3, 4, 4]);
    expect(image.data[0]).toBeCloseTo(0.75, 6);
  });

  it("applies the scheduler step", async () => {
    const sock = await startEcho();
    client = await connect(sock);
    const latent = makeTensor([1, 2, 2], 1.0);
    const eps = makeTensor([1, 2, 2], 2.0);
    const head = Buffer.alloc(8);
    head.writeUInt32LE(1000, 0);
    head.writeUInt32LE(500, 4);
    const reply = collectFrames(client, 1);
    client.write(
      encodeFrame(
        MessageKind.SchedulerStep,
        Buffer.concat([head, encodeTensor(latent), encodeTensor(eps)]),
      ),
    );
    const [frame] = await reply;
    expect(frame.kind).toBe(MessageKind.SchedulerReply);
    const out = decodeTensor(frame.payload);
    // z + ((500 - 1000) / 1000) * eps = 1 - 0.5 * 2 = 0
    expect(out.data[0]).toBeCloseTo(0.0, 6);
  });
});

describe("backend registry", () => {
  it("rejects unknown model ids", () => {
    expect(() => createBackend("definitely-not-a-model", [5, 8])).toThrow(ProtocolError);
  });

  it("enforces hookable layer bounds", () => {
    expect(() => new EchoBackend([12])).toThrow(ProtocolError);
  });
});
