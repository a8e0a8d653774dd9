/** Shared test scaffolding: a real-inflater PNG decoder and a scriptable fetch. */

import { inflateSync } from "node:zlib";

export interface DecodedPng {
  width: number;
  height: number;
  pixels: Uint8Array; // row-major grayscale bytes
}

/** Independent decode path: node's zlib, not the encoder under test. */
export function decodeGrayPng(bytes: Uint8Array): DecodedPng {
  const sig = [0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a];
  sig.forEach((b, i) => {
    if (bytes[i] !== b) throw new Error("bad PNG signature");
  });
  let off = 8;
  let width = 0;
  let height = 0;
  const idat: Buffer[] = [];
  while (off < bytes.length) {
    const len = (bytes[off]! << 24) | (bytes[off + 1]! << 16) | (bytes[off + 2]! << 8) | bytes[off + 3]!;
    const type = String.fromCharCode(bytes[off + 4]!, bytes[off + 5]!, bytes[off + 6]!, bytes[off + 7]!);
    const body = bytes.subarray(off + 8, off + 8 + len);
    if (type === "IHDR") {
      width = (body[0]! << 24) | (body[1]! << 16) | (body[2]! << 8) | body[3]!;
      height = (body[4]! << 24) | (body[5]! << 16) | (body[6]! << 8) | body[7]!;
      if (body[8] !== 8 || body[9] !== 0) throw new Error("expected 8-bit grayscale");
    } else if (type === "IDAT") {
      idat.push(Buffer.from(body));
    }
    off += 12 + len;
    if (type === "IEND") break;
  }
  const raw = inflateSync(Buffer.concat(idat));
  const stride = width + 1;
  if (raw.length !== height * stride) throw new Error(`scanline size mismatch: ${raw.length}`);
  const pixels = new Uint8Array(width * height);
  for (let y = 0; y < height; y++) {
    if (raw[y * stride] !== 0) throw new Error(`unexpected filter ${raw[y * stride]} on row ${y}`);
    pixels.set(raw.subarray(y * stride + 1, (y + 1) * stride), y * width);
  }
  return { width, height, pixels };
}

export interface RouteResponse {
  status?: number;
  body: unknown;
}

export type Route = RouteResponse | (() => RouteResponse | Promise<RouteResponse>);

export interface FakeService {
  fetch: (url: string, init?: RequestInit) => Promise<Response>;
  calls: Array<{ path: string; method: string; body: unknown }>;
}

/** fetch stub keyed by "METHOD path"; unrouted paths 404. */
export function fakeService(routes: Record<string, Route>): FakeService {
  const calls: FakeService["calls"] = [];
  return {
    calls,
    fetch: async (url, init) => {
      const path = new URL(url).pathname;
      const method = init?.method ?? "GET";
      let body: unknown = null;
      if (typeof init?.body === "string") body = JSON.parse(init.body);
      calls.push({ path, method, body });
      const route = routes[`${method} ${path}`];
      if (route === undefined) {
        return new Response(JSON.stringify({ error: `no route ${method} ${path}` }), { status: 404 });
      }
      const result = typeof route === "function" ? await route() : route;
      return new Response(JSON.stringify(result.body), {
        status: result.status ?? 200,
        headers: { "Content-Type": "application/json" },
      });
    },
  };
}
