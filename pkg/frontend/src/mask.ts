/**
 * Brush-based binary mask editor plus a dependency-free PNG encoder.
 *
 * The editor is a flat byte grid with disk-stamp paint and erase. Radius 0
 * stamps exactly one pixel. The encoder emits an 8-bit grayscale PNG whose
 * zlib stream uses stored (uncompressed) deflate blocks, which keeps it
 * byte-exact and runnable in both the browser and node without libraries.
 */

export class MaskEditor {
  private readonly data: Uint8Array;

  constructor(readonly width: number, readonly height: number) {
    if (!Number.isInteger(width) || !Number.isInteger(height) || width < 1 || height < 1) {
      throw new Error(`bad mask shape ${width}x${height}`);
    }
    this.data = new Uint8Array(width * height);
  }

  private stamp(cx: number, cy: number, radius: number, value: 0 | 1): void {
    if (radius < 0) throw new Error("radius must be >= 0");
    const r2 = radius * radius;
    const x0 = Math.max(0, Math.ceil(cx - radius));
    const x1 = Math.min(this.width - 1, Math.floor(cx + radius));
    const y0 = Math.max(0, Math.ceil(cy - radius));
    const y1 = Math.min(this.height - 1, Math.floor(cy + radius));
    for (let y = y0; y <= y1; y++) {
      for (let x = x0; x <= x1; x++) {
        const dx = x - cx;
        const dy = y - cy;
        if (dx * dx + dy * dy <= r2) {
          this.data[y * this.width + x] = value;
        }
      }
    }
  }

  paint(x: number, y: number, radius: number): void {
    this.stamp(x, y, radius, 1);
  }

  erase(x: number, y: number, radius: number): void {
    this.stamp(x, y, radius, 0);
  }

  isSet(x: number, y: number): boolean {
    if (x < 0 || y < 0 || x >= this.width || y >= this.height) return false;
    return this.data[y * this.width + x] === 1;
  }

  count(): number {
    let n = 0;
    for (let i = 0; i < this.data.length; i++) n += this.data[i]!;
    return n;
  }

  /** Set pixels as [x, y] pairs in row-major order. */
  pixels(): Array<[number, number]> {
    const out: Array<[number, number]> = [];
    for (let y = 0; y < this.height; y++) {
      for (let x = 0; x < this.width; x++) {
        if (this.data[y * this.width + x] === 1) out.push([x, y]);
      }
    }
    return out;
  }

  clear(): void {
    this.data.fill(0);
  }
}

const CRC_TABLE = (() => {
  const table = new Uint32Array(256);
  for (let n = 0; n < 256; n++) {
    let c = n;
    for (let k = 0; k < 8; k++) {
      c = c & 1 ? 0xedb88320 ^ (c >>> 1) : c >>> 1;
    }
    table[n] = c >>> 0;
  }
  return table;
})();

export function crc32(bytes: Uint8Array): number {
  let c = 0xffffffff;
  for (let i = 0; i < bytes.length; i++) {
    c = CRC_TABLE[(c ^ bytes[i]!) & 0xff]! ^ (c >>> 8);
  }
  return (c ^ 0xffffffff) >>> 0;
}

export function adler32(bytes: Uint8Array): number {
  let a = 1;
  let b = 0;
  for (let i = 0; i < bytes.length; i++) {
    a = (a + bytes[i]!) % 65521;
    b = (b + a) % 65521;
  }
  return ((b << 16) | a) >>> 0;
}

function be32(value: number): Uint8Array {
  return new Uint8Array([(value >>> 24) & 0xff, (value >>> 16) & 0xff, (value >>> 8) & 0xff, value & 0xff]);
}

function concat(parts: Uint8Array[]): Uint8Array {
  let total = 0;
  for (const p of parts) total += p.length;
  const out = new Uint8Array(total);
  let off = 0;
  for (const p of parts) {
    out.set(p, off);
    off += p.length;
  }
  return out;
}

function chunk(type: string, body: Uint8Array): Uint8Array {
  const typeBytes = new Uint8Array(4);
  for (let i = 0; i < 4; i++) typeBytes[i] = type.charCodeAt(i);
  const crc = crc32(concat([typeBytes, body]));
  return concat([be32(body.length), typeBytes, body, be32(crc)]);
}

/** Raw scanlines wrapped in a zlib stream of stored deflate blocks. */
function zlibStored(raw: Uint8Array): Uint8Array {
  const parts: Uint8Array[] = [new Uint8Array([0x78, 0x01])];
  const blockMax = 65535;
  let off = 0;
  do {
    const len = Math.min(blockMax, raw.length - off);
    const final = off + len >= raw.length ? 1 : 0;
    const header = new Uint8Array([final, len & 0xff, (len >>> 8) & 0xff, ~len & 0xff, (~len >>> 8) & 0xff]);
    parts.push(header, raw.subarray(off, off + len));
    off += len;
  } while (off < raw.length);
  parts.push(be32(adler32(raw)));
  return concat(parts);
}

/**
 * Encode a binary mask as an 8-bit grayscale PNG. Set pixels become 255,
 * clear pixels 0.
 */
export function encodeMaskPng(mask: MaskEditor): Uint8Array {
  const { width, height } = mask;
  const raw = new Uint8Array(height * (width + 1));
  for (let y = 0; y < height; y++) {
    const row = y * (width + 1);
    raw[row] = 0; // filter: none
    for (let x = 0; x < width; x++) {
      raw[row + 1 + x] = mask.isSet(x, y) ? 255 : 0;
    }
  }
  const ihdr = concat([
    be32(width),
    be32(height),
    new Uint8Array([8, 0, 0, 0, 0]), // depth 8, grayscale, deflate, filter 0, no interlace
  ]);
  const signature = new Uint8Array([0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a]);
  return concat([signature, chunk("IHDR", ihdr), chunk("IDAT", zlibStored(raw)), chunk("IEND", new Uint8Array(0))]);
}

const B64 = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

export function bytesToBase64(bytes: Uint8Array): string {
  let out = "";
  for (let i = 0; i < bytes.length; i += 3) {
    const b0 = bytes[i]!;
    const b1 = i + 1 < bytes.length ? bytes[i + 1]! : 0;
    const b2 = i + 2 < bytes.length ? bytes[i + 2]! : 0;
    out += B64[b0 >> 2]! + B64[((b0 & 3) << 4) | (b1 >> 4)]!;
    out += i + 1 < bytes.length ? B64[((b1 & 15) << 2) | (b2 >> 6)]! : "=";
    out += i + 2 < bytes.length ? B64[b2 & 63]! : "=";
  }
  return out;
}

export function maskToBase64Png(mask: MaskEditor): string {
  return bytesToBase64(encodeMaskPng(mask));
}
