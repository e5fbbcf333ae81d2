#!/usr/bin/env node
/**
 * Bridge CLI.
 *
 *     mvsync-bridge serve --endpoint tcp:127.0.0.1:7977 --model echo --layers 5,8
 *
 * Serves until killed. The model cache directory for real checkpoints is
 * taken from MVSYNC_BRIDGE_CACHE when an adapter needs it.
 */

import process from "node:process";

import { createBackend } from "./backend.js";
import { parseEndpoint, serve } from "./server.js";

interface Args {
  endpoint: string;
  model: string;
  layers: number[];
}

function parseArgs(argv: string[]): Args {
  const args: Args = { endpoint: "tcp:127.0.0.1:7977", model: "echo", layers: [5, 8] };
  for (let i = 0; i < argv.length; i++) {
    const flag = argv[i];
    const value = argv[i + 1];
    switch (flag) {
      case "--endpoint":
        args.endpoint = value;
        i++;
        break;
      case "--model":
        args.model = value;
        i++;
        break;
      case "--layers":
        args.layers = value.split(",").map((p) => Number(p.trim()));
        i++;
        break;
      case "--help":
      case "-h":
        console.log(
          "usage: mvsync-bridge serve --endpoint tcp:HOST:PORT|unix:PATH --model echo --layers 5,8",
        );
        process.exit(0);
        break;
      default:
        throw new Error(`unknown flag '${flag}'`);
    }
  }
  return args;
}

async function main(): Promise<void> {
  const [command, ...rest] = process.argv.slice(2);
  if (command !== "serve") {
    console.error("usage: mvsync-bridge serve [--endpoint ...] [--model ...] [--layers ...]");
    process.exit(2);
  }
  const args = parseArgs(rest);
  const backend = createBackend(args.model, args.layers);
  const endpoint = parseEndpoint(args.endpoint);
  const bridge = await serve(backend, endpoint);
  console.log(`serving model '${args.model}' on ${args.endpoint} (layers ${args.layers.join(",")})`);
  const shutdown = () => {
    void bridge.close().then(() => process.exit(0));
  };
  process.on("SIGINT", shutdown);
  process.on("SIGTERM", shutdown);
}

main().catch((err) => {
  console.error(`error: ${err instanceof Error ? err.message : err}`);
  process.exit(1);
});
