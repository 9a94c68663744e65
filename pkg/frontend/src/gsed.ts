// Reader for the binary scene container the server exports.
//
// Layout (all little-endian):
//   "GSED" | version u16 | N u32 | embed_dim u16 | sh_degree u16
//   x, scale, q, alpha, sh, embed as float32 arrays in that order
//   object_id as int32 | active flags packed 8 per byte (LSB first)
//   trailer length u32 | JSON trailer | CRC32 of all preceding bytes

export class SceneParseError extends Error {
  constructor(message: string) {
    super(message)
    this.name = 'SceneParseError'
  }
}

export interface SceneTrailer {
  codec: unknown
  camera: unknown
  metadata: Record<string, unknown>
  seed: number | null
  background: number[]
  objects: unknown[]
  edit_log: unknown[]
}

export interface ParsedScene {
  n: number
  embedDim: number
  shDegree: number
  shCoeffs: number
  /** (n, 3) row-major */
  x: Float32Array
  /** (n, 3) row-major */
  scale: Float32Array
  /** (n, 4) row-major */
  q: Float32Array
  alpha: Float32Array
  /** (n, shCoeffs) row-major */
  sh: Float32Array
  /** (n, embedDim) row-major */
  embed: Float32Array
  objectId: Int32Array
  /** One 0/1 entry per Gaussian, unpacked from the bit field. */
  active: Uint8Array
  trailer: SceneTrailer
}

const MAGIC = 'GSED'
const SUPPORTED_VERSION = 1
const HEADER_BYTES = 4 + 2 + 4 + 2 + 2

let crcTable: Uint32Array | null = null

function buildCrcTable(): Uint32Array {
  const table = new Uint32Array(256)
  for (let i = 0; i < 256; i++) {
    let c = i
    for (let k = 0; k < 8; k++) {
      c = c & 1 ? 0xedb88320 ^ (c >>> 1) : c >>> 1
    }
    table[i] = c >>> 0
  }
  return table
}

export function crc32(bytes: Uint8Array): number {
  if (!crcTable) crcTable = buildCrcTable()
  let c = 0xffffffff
  for (let i = 0; i < bytes.length; i++) {
    c = crcTable[(c ^ bytes[i]) & 0xff] ^ (c >>> 8)
  }
  return (c ^ 0xffffffff) >>> 0
}

/** float32 slice at byte offset; copies so alignment never matters. */
function takeF32(buf: ArrayBuffer, offset: number, count: number): [Float32Array, number] {
  const end = offset + count * 4
  if (end > buf.byteLength) throw new SceneParseError('scene file ends inside an array')
  return [new Float32Array(buf.slice(offset, end)), end]
}

export function parseScene(buffer: ArrayBuffer): ParsedScene {
  const bytes = new Uint8Array(buffer)
  if (bytes.length >= 4) {
    const magic = String.fromCharCode(bytes[0], bytes[1], bytes[2], bytes[3])
    if (magic !== MAGIC) {
      throw new SceneParseError(`not a scene file: magic ${JSON.stringify(magic)}`)
    }
  }
  if (bytes.length < HEADER_BYTES + 4 + 2 + 4) {
    throw new SceneParseError(`scene file truncated at ${bytes.length} bytes`)
  }

  const stored = new DataView(buffer, buffer.byteLength - 4).getUint32(0, true)
  const actual = crc32(bytes.subarray(0, bytes.length - 4))
  if (stored !== actual) {
    throw new SceneParseError(
      `checksum mismatch: stored ${stored.toString(16)}, computed ${actual.toString(16)}`,
    )
  }

  const view = new DataView(buffer)
  const version = view.getUint16(4, true)
  if (version !== SUPPORTED_VERSION) {
    throw new SceneParseError(`unsupported scene file version ${version}`)
  }
  const n = view.getUint32(6, true)
  const embedDim = view.getUint16(10, true)
  const shDegree = view.getUint16(12, true)
  const shCoeffs = 3 * (shDegree + 1) ** 2

  let off = HEADER_BYTES
  let x: Float32Array, scale: Float32Array, q: Float32Array
  let alpha: Float32Array, sh: Float32Array, embed: Float32Array
  ;[x, off] = takeF32(buffer, off, n * 3)
  ;[scale, off] = takeF32(buffer, off, n * 3)
  ;[q, off] = takeF32(buffer, off, n * 4)
  ;[alpha, off] = takeF32(buffer, off, n)
  ;[sh, off] = takeF32(buffer, off, n * shCoeffs)
  ;[embed, off] = takeF32(buffer, off, n * embedDim)

  const idEnd = off + n * 4
  if (idEnd > buffer.byteLength) throw new SceneParseError('scene file ends inside an array')
  const objectId = new Int32Array(buffer.slice(off, idEnd))
  off = idEnd

  const packedLen = Math.ceil(n / 8)
  const active = new Uint8Array(n)
  const packed = bytes.subarray(off, off + packedLen)
  if (packed.length < packedLen) throw new SceneParseError('scene file ends inside an array')
  for (let i = 0; i < n; i++) {
    active[i] = (packed[i >> 3] >> (i & 7)) & 1
  }
  off += packedLen

  const trailerLen = view.getUint32(off, true)
  off += 4
  const trailerEnd = off + trailerLen
  if (trailerEnd + 4 !== buffer.byteLength) {
    throw new SceneParseError('trailer length does not match the file size')
  }
  let trailer: SceneTrailer
  try {
    trailer = JSON.parse(new TextDecoder().decode(bytes.subarray(off, trailerEnd)))
  } catch (err) {
    throw new SceneParseError(`bad JSON trailer: ${err}`)
  }

  return { n, embedDim, shDegree, shCoeffs, x, scale, q, alpha, sh, embed, objectId, active, trailer }
}
