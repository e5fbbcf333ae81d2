/**
 * Bridge server: answers protocol frames on TCP or unix-domain sockets.
 *
 * One request is in flight per connection; multiple connections are
 * accepted and served independently (backends here are synchronous and
 * stateless, so no cross-connection serialization is needed). A frame with
 * bad magic bytes gets one ERROR reply and the stream is resynchronized;
 * malformed payloads get ERROR replies with the connection kept alive.
 */

import net from "node:net";

import { DenoiserBackend } from "./backend.js";
import {
  ErrorCode,
  Frame,
  FrameParser,
  MessageKind,
  PayloadReader,
  ProtocolError,
  decodeRequest,
  encodeError,
  encodeFrame,
  encodeResponse,
  encodeTensor,
} from "./protocol.js";

export interface Endpoint {
  kind: "tcp" | "unix";
  host?: string;
  port?: number;
  path?: string;
}

export function parseEndpoint(spec: string): Endpoint {
  if (spec.startsWith("tcp:")) {
    const rest = spec.slice(4);
    const at = rest.lastIndexOf(":");
    if (at <= 0) throw new Error(`expected tcp:HOST:PORT, got '${spec}'`);
    const port = Number(rest.slice(at + 1));
    if (!Number.isInteger(port)) throw new Error(`bad port in '${spec}'`);
    return { kind: "tcp", host: rest.slice(0, at), port };
  }
  if (spec.startsWith("unix:")) {
    return { kind: "unix", path: spec.slice(5) };
  }
  throw new Error(`unknown endpoint '${spec}'; expected tcp:HOST:PORT or unix:PATH`);
}

function handleFrame(backend: DenoiserBackend, frame: Frame): Buffer {
  switch (frame.kind) {
    case MessageKind.NoiseQuery:
    case MessageKind.FeatureInjectQuery: {
      const request = decodeRequest(frame.kind, frame.payload);
      const response = backend.query(request);
      return encodeFrame(MessageKind.NoiseReply, encodeResponse(response));
    }
    case MessageKind.DecodeQuery: {
      const r = new PayloadReader(frame.payload);
      const viewId = r.u32();
      const latent = r.tensor();
      r.done();
      const image = backend.decode(viewId, latent);
      return encodeFrame(MessageKind.DecodeReply, encodeTensor(image));
    }
    case MessageKind.SchedulerStep: {
      const r = new PayloadReader(frame.payload);
      const timestep = r.u32();
      const timestepNext = r.u32();
      const latent = r.tensor();
      const eps = r.tensor();
      r.done();
      const stepped = backend.schedulerStep(timestep, timestepNext, latent, eps);
      return encodeFrame(MessageKind.SchedulerReply, encodeTensor(stepped));
    }
    default:
      return encodeFrame(
        MessageKind.Error,
        encodeError(ErrorCode.BadMessage, `unsupported message kind ${frame.kind}`),
      );
  }
}

export function attachConnection(backend: DenoiserBackend, socket: net.Socket): void {
  const parser = new FrameParser(() => {
    socket.write(encodeFrame(MessageKind.Error, encodeError(ErrorCode.BadMagic, "bad magic")));
  });
  socket.on("data", (chunk: Buffer) => {
    let frames: Frame[];
    try {
      frames = parser.push(chunk);
    } catch (err) {
      socket.write(
        encodeFrame(MessageKind.Error, encodeError(ErrorCode.BadMessage, String(err))),
      );
      socket.destroy();
      return;
    }
    for (const frame of frames) {
      try {
        socket.write(handleFrame(backend, frame));
      } catch (err) {
        const code = err instanceof ProtocolError ? err.code : ErrorCode.ModelFailure;
        const message = err instanceof Error ? err.message : String(err);
        socket.write(encodeFrame(MessageKind.Error, encodeError(code, message)));
      }
    }
  });
  socket.on("error", () => {
    socket.destroy();
  });
}

export interface BridgeServer {
  server: net.Server;
  close(): Promise<void>;
}

export function serve(backend: DenoiserBackend, endpoint: Endpoint): Promise<BridgeServer> {
  const server = net.createServer((socket) => attachConnection(backend, socket));
  return new Promise((resolve, reject) => {
    server.once("error", reject);
    const onListening = () => {
      server.removeListener("error", reject);
      resolve({
        server,
        close: () =>
          new Promise<void>((done) => {
            server.close(() => done());
          }),
      });
    };
    if (endpoint.kind === "tcp") {
      server.listen(endpoint.port, endpoint.host, onListening);
    } else {
      server.listen(endpoint.path, onListening);
    }
  });
}
