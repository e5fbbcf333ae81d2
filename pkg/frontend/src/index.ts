export {
  ConditioningMode,
  ErrorCode,
  FrameParser,
  MessageKind,
  ProtocolError,
  decodeError,
  decodeRequest,
  decodeTensor,
  encodeError,
  encodeFrame,
  encodeResponse,
  encodeTensor,
  makeTensor,
} from "./protocol.js";
export type { Frame, NoiseRequest, NoiseResponse, Tensor } from "./protocol.js";
export { EchoBackend, HookRegistry, createBackend } from "./backend.js";
export type { DenoiserBackend } from "./backend.js";
export { attachConnection, parseEndpoint, serve } from "./server.js";
export type { BridgeServer, Endpoint } from "./server.js";
