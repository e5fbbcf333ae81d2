/**
 * Denoiser backends and the hook registry.
 *
 * A backend answers three calls: query (noise estimate plus hook-layer
 * features for one conditioning mode, optionally with injected features
 * replacing the hooked activations), decode (latent to image), and an
 * optional scheduler step. Real instruction-conditioned latent diffusion
 * editors plug in behind this interface; their adapter registers
 * capture/injection handles on the configured decoder blocks through a
 * HookRegistry and re-runs the denoiser with replaced activations on
 * injected queries.
 *
 * The echo backend ships for protocol conformance testing: zero noise and
 * zero features of the contracted shapes, no model weights required.
 */

import {
  ConditioningMode,
  ErrorCode,
  NoiseRequest,
  NoiseResponse,
  ProtocolError,
  Tensor,
  makeTensor,
  tensorElementCount,
} from "./protocol.js";

export interface DenoiserBackend {
  readonly modelId: string;
  readonly hooks: HookRegistry;
  query(request: NoiseRequest): NoiseResponse;
  decode(viewId: number, latent: Tensor): Tensor;
  /** Deterministic sampler update the engine may delegate to the bridge. */
  schedulerStep(timestep: number, timestepNext: number, latent: Tensor, eps: Tensor): Tensor;
}

/**
 * Capture/injection bookkeeping for the configured aligned layers.
 *
 * Exactly the configured layers are hooked; a request for any other layer
 * is a contract violation and is refused. Injection must be shape
 * compatible with the captured activation.
 */
export class HookRegistry {
  readonly layers: readonly number[];

  constructor(layers: number[]) {
    const cleaned = [...new Set(layers)].sort((a, b) => a - b);
    for (const layer of cleaned) {
      if (layer < 1 || layer > 11) {
        throw new ProtocolError(`hook layer ${layer} outside the valid range 1..11`);
      }
    }
    this.layers = cleaned;
  }

  checkRequested(requested: number[]): void {
    for (const layer of requested) {
      if (!this.layers.includes(layer)) {
        throw new ProtocolError(
          `layer ${layer} is not hooked (configured: ${this.layers.join(", ")})`,
          ErrorCode.BadMessage,
        );
      }
    }
  }

  checkInjected(injected: Map<number, Tensor>, expectedDims: number[]): void {
    for (const [layer, tensor] of injected) {
      if (!this.layers.includes(layer)) {
        throw new ProtocolError(
          `injected layer ${layer} is not hooked (configured: ${this.layers.join(", ")})`,
          ErrorCode.BadMessage,
        );
      }
      if (
        tensor.dims.length !== expectedDims.length ||
        tensor.dims.some((d, i) => d !== expectedDims[i])
      ) {
        throw new ProtocolError(
          `injected feature for layer ${layer} has dims [${tensor.dims}], expected [${expectedDims}]`,
          ErrorCode.ShapeMismatch,
        );
      }
    }
  }
}

/**
 * Protocol-conformance backend: zero noise, zero features.
 *
 * Features are reported at latent resolution (the hooked-tensor shape for
 * this backend). Replace-with-self injection therefore reproduces the
 * uninjected reply exactly. decode() returns the first three channels of
 * the latent clamped to [0, 1]; with fewer channels the remaining planes
 * are zero.
 */
export class EchoBackend implements DenoiserBackend {
  readonly modelId = "echo";
  readonly hooks: HookRegistry;

  constructor(alignedLayers: number[] = [5, 8]) {
    this.hooks = new HookRegistry(alignedLayers);
  }

  query(request: NoiseRequest): NoiseResponse {
    this.hooks.checkRequested(request.hookLayers);
    this.hooks.checkInjected(request.injectedFeatures, request.latent.dims);
    if (request.mode !== ConditioningMode.Uncond && request.condImage === undefined) {
      throw new ProtocolError(
        `conditioning mode ${request.mode} requires a conditioning image`,
        ErrorCode.BadMessage,
      );
    }
    const eps = makeTensor(request.latent.dims);
    const features = new Map<number, Tensor>();
    for (const layer of request.hookLayers) {
      features.set(layer, makeTensor(request.latent.dims));
    }
    return { eps, features };
  }

  decode(_viewId: number, latent: Tensor): Tensor {
    if (latent.dims.length !== 3) {
      throw new ProtocolError(
        `decode expects a (C, H, W) latent, got rank ${latent.dims.length}`,
        ErrorCode.ShapeMismatch,
      );
    }
    const [c, h, w] = latent.dims;
    const image = makeTensor([3, h, w]);
    const planes = Math.min(3, c);
    for (let p = 0; p < planes; p++) {
      for (let i = 0; i < h * w; i++) {
        const v = latent.data[p * h * w + i];
        image.data[p * h * w + i] = Math.min(1, Math.max(0, v));
      }
    }
    return image;
  }

  schedulerStep(timestep: number, timestepNext: number, latent: Tensor, eps: Tensor): Tensor {
    if (tensorElementCount(latent.dims) !== tensorElementCount(eps.dims)) {
      throw new ProtocolError("latent and eps disagree in size", ErrorCode.ShapeMismatch);
    }
    if (timestepNext >= timestep) {
      throw new ProtocolError("scheduler step requires a descending timestep", ErrorCode.BadMessage);
    }
    // Deterministic (eta = 0) update in the variance-exploding
    // parameterization with sigma(t) = t / 1000, the protocol's
    // conventional schedule scale.
    const dSigma = (timestepNext - timestep) / 1000.0;
    const out = makeTensor(latent.dims);
    for (let i = 0; i < out.data.length; i++) {
      out.data[i] = latent.data[i] + dSigma * eps.data[i];
    }
    return out;
  }
}

export function createBackend(modelId: string, alignedLayers: number[]): DenoiserBackend {
  if (modelId === "echo") {
    return new EchoBackend(alignedLayers);
  }
  // Real instruction-conditioned editor checkpoints register here once an
  // adapter exposes them through DenoiserBackend; without model weights
  // installed only the conformance backend is available.
  throw new ProtocolError(`unknown model id '${modelId}'`, ErrorCode.ModelFailure);
}
