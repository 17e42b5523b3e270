"""Synthetic moving-shape videos with exact optical flow and masks.

Objects (rectangles and disks) translate over a noise background that is
either static or drifting by a whole number of pixels per frame. Because all
motion is a translation the flow is known analytically, and with integer
velocities the next mask is exactly the current mask moved by the flow.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BACKGROUNDS = ("static-noise", "drifting-noise")
SHAPES = ("rectangle", "disk")


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 64
    min_objects: int = 1
    max_objects: int = 2
    shapes: tuple = SHAPES
    max_speed: float = 4.0
    background: str = "random"  # one of BACKGROUNDS or "random"
    n_frames: int = 8
    integer_velocity: bool = True
    allow_overlap: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.min_objects <= self.max_objects <= 3:
            raise ValueError("object count must lie in 1..3")
        if self.background not in BACKGROUNDS + ("random",):
            raise ValueError(f"unknown background mode {self.background!r}")
        if self.n_frames < 2:
            raise ValueError("a clip needs at least two frames")
        if self.max_speed > 4 or self.max_speed < 1:
            raise ValueError("max_speed must lie in [1, 4]")


@dataclass
class ShapeTrack:
    kind: str
    size: tuple  # (w, h) for rectangles, (radius,) for disks
    color: np.ndarray
    texture: np.ndarray
    positions: list = field(default_factory=list)  # top-left (x, y) per frame
    velocities: list = field(default_factory=list)  # displacement frame k -> k+1

    def extent(self) -> tuple[float, float]:
        if self.kind == "rectangle":
            return self.size
        d = 2 * self.size[0] + 1
        return d, d

    def footprint(self, pos, height: int, width: int) -> np.ndarray:
        """Boolean mask of the shape with top-left corner at ``pos``."""
        x0, y0 = pos
        ys, xs = np.mgrid[0:height, 0:width]
        if self.kind == "rectangle":
            w, h = self.size
            return (xs >= x0) & (xs < x0 + w) & (ys >= y0) & (ys < y0 + h)
        r = self.size[0]
        cx, cy = x0 + r, y0 + r
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r


@dataclass
class VideoSequence:
    frames: np.ndarray  # [N, H, W, 3] uint8
    flows: np.ndarray  # [N-1, H, W, 2] float64, (dx, dy)
    flow_rgb: np.ndarray  # [N-1, H, W, 3] uint8
    masks: np.ndarray  # [N, H, W] uint8 in {0, 1}
    seed: int = 0

    def __len__(self) -> int:
        return len(self.frames)


def _noise_texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    coarse = rng.uniform(0, 255, (h // 8 + 2, w // 8 + 2, 3))
    up = np.kron(coarse, np.ones((8, 8, 1)))[:h, :w]
    fine = rng.normal(0, 18, (h, w, 3))
    return np.clip(0.6 * up + 0.4 * 128 + fine, 0, 255)


def _sample_velocity(rng: np.random.Generator, cfg: SceneConfig) -> np.ndarray:
    while True:
        if cfg.integer_velocity:
            m = int(np.floor(cfg.max_speed))
            v = rng.integers(-m, m + 1, size=2).astype(float)
        else:
            v = rng.uniform(-cfg.max_speed, cfg.max_speed, size=2)
        speed = np.hypot(*v)
        if 1.0 <= speed <= cfg.max_speed:
            return v


def _make_track(rng: np.random.Generator, cfg: SceneConfig) -> ShapeTrack:
    kind = cfg.shapes[int(rng.integers(len(cfg.shapes)))]
    lo, hi = max(cfg.height // 8, 4), max(cfg.height // 3, 6)
    if kind == "rectangle":
        size = (int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1)))
    else:
        size = (int(rng.integers(lo // 2 + 1, hi // 2 + 1)),)
    color = rng.uniform(30, 225, 3)
    track = ShapeTrack(kind, size, color, rng.normal(0, 12, (cfg.height, cfg.width, 3)))
    w, h = track.extent()
    x = float(rng.integers(1, cfg.width - w - 1))
    y = float(rng.integers(1, cfg.height - h - 1))
    v = _sample_velocity(rng, cfg)
    track.positions.append(np.array([x, y]))
    for _ in range(cfg.n_frames - 1):
        p = track.positions[-1]
        for axis, limit in ((0, cfg.width - w), (1, cfg.height - h)):
            # reflect so the whole shape stays at least one pixel inside
            if not 1 <= p[axis] + v[axis] <= limit - 1:
                v = v.copy()
                v[axis] = -v[axis]
        track.velocities.append(v.copy())
        track.positions.append(p + v)
    return track


def _render(tracks: list[ShapeTrack], bg_texture: np.ndarray, bg_velocity: np.ndarray, cfg: SceneConfig):
    H, W, N = cfg.height, cfg.width, cfg.n_frames
    frames = np.empty((N, H, W, 3), dtype=np.uint8)
    masks = np.zeros((N, H, W), dtype=np.uint8)
    flows = np.zeros((N - 1, H, W, 2))
    # content at pixel p in frame k reappears at p + v in frame k+1, so the
    # crop offset moves by -v each frame
    vx, vy = int(bg_velocity[0]), int(bg_velocity[1])
    ox0 = vx * (N - 1) if vx > 0 else 0
    oy0 = vy * (N - 1) if vy > 0 else 0
    for k in range(N):
        ox, oy = ox0 - vx * k, oy0 - vy * k
        img = bg_texture[oy:oy + H, ox:ox + W].copy()
        if k < N - 1:
            flows[k] = bg_velocity
        for tr in tracks:  # later tracks are nearer
            fp = tr.footprint(tr.positions[k], H, W)
            x0, y0 = tr.positions[k]
            # object texture is attached to the object, so it moves with it
            tex = np.roll(tr.texture, (int(round(y0)), int(round(x0))), axis=(0, 1))
            img[fp] = np.clip(tr.color + tex[fp], 0, 255)
            masks[k][fp] = 1
            if k < N - 1:
                flows[k][fp] = tr.velocities[k]
        frames[k] = np.round(img).astype(np.uint8)
    return frames, masks, flows


def generate_sequence(cfg: SceneConfig) -> VideoSequence:
    """Render one clip; identical configs give byte-identical output."""
    rng = np.random.default_rng(cfg.seed)
    n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    background = cfg.background
    if background == "random":
        background = BACKGROUNDS[int(rng.integers(len(BACKGROUNDS)))]
    bg_velocity = np.zeros(2)
    if background == "drifting-noise":
        while not bg_velocity.any():
            bg_velocity = rng.integers(-1, 2, size=2).astype(float)
    for _ in range(200):
        tracks = [_make_track(rng, cfg) for _ in range(n_obj)]
        if cfg.allow_overlap or not _tracks_overlap(tracks, cfg):
            break
    else:
        tracks = tracks[:1]
    pad = int(np.abs(bg_velocity).max()) * (cfg.n_frames - 1)
    bg_texture = _noise_texture(rng, cfg.height + pad, cfg.width + pad)
    frames, masks, flows = _render(tracks, bg_texture, bg_velocity, cfg)
    flow_rgb = np.stack([flow_to_rgb(f) for f in flows])
    return VideoSequence(frames, flows, flow_rgb, masks, cfg.seed)


def _tracks_overlap(tracks: list[ShapeTrack], cfg: SceneConfig) -> bool:
    for k in range(cfg.n_frames):
        occupied = np.zeros((cfg.height, cfg.width), dtype=bool)
        for tr in tracks:
            # one-pixel guard band keeps shapes from touching
            fp = tr.footprint(tr.positions[k], cfg.height, cfg.width)
            grown = fp.copy()
            grown[1:] |= fp[:-1]
            grown[:-1] |= fp[1:]
            grown[:, 1:] |= fp[:, :-1]
            grown[:, :-1] |= fp[:, 1:]
            if (occupied & grown).any():
                return True
            occupied |= fp
    return False


def warp_mask(mask: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Forward-warp foreground pixels by their (rounded) flow vectors."""
    H, W = mask.shape
    out = np.zeros_like(mask)
    ys, xs = np.nonzero(mask)
    tx = np.round(xs + flow[ys, xs, 0]).astype(int)
    ty = np.round(ys + flow[ys, xs, 1]).astype(int)
    keep = (tx >= 0) & (tx < W) & (ty >= 0) & (ty < H)
    out[ty[keep], tx[keep]] = 1
    return out


# ---------------------------------------------------------------------- flow colorization
def _hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Vectorised HSV -> RGB; h in [0, 1)."""
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    choices = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    rgb = np.zeros(h.shape + (3,))
    for k, (r, g, b) in enumerate(choices):
        sel = i == k
        rgb[sel, 0] = r[sel]
        rgb[sel, 1] = g[sel]
        rgb[sel, 2] = b[sel]
    return rgb


def flow_to_rgb(flow: np.ndarray) -> np.ndarray:
    """Color a [H, W, 2] flow field: direction -> hue, relative magnitude -> saturation.

    Magnitudes are normalised by the frame maximum (floored at 1e-6), value is
    fixed at 1, so a zero field renders white.
    """
    dx, dy = flow[..., 0], flow[..., 1]
    mag = np.hypot(dx, dy)
    hue = (np.arctan2(dy, dx) / (2 * np.pi)) % 1.0
    sat = mag / max(mag.max(), 1e-6)
    rgb = _hsv_to_rgb(hue, sat, np.ones_like(sat))
    return np.round(rgb * 255).astype(np.uint8)


# ---------------------------------------------------------------------- netpbm I/O
class NetpbmError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def _encode(magic: bytes, arr: np.ndarray) -> bytes:
    h, w = arr.shape[:2]
    return magic + b"\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(arr, dtype=np.uint8).tobytes()


def write_ppm(image: np.ndarray) -> bytes:
    """Binary P6 encoding of an [H, W, 3] uint8 image."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"PPM needs [H, W, 3], got {image.shape}")
    return _encode(b"P6", image)


def write_pgm(mask: np.ndarray) -> bytes:
    """Binary P5 encoding of a binary [H, W] mask stored as {0, 255}."""
    if mask.ndim != 2:
        raise ValueError(f"PGM needs [H, W], got {mask.shape}")
    return _encode(b"P5", np.where(mask > 0, 255, 0))


def _parse_header(data: bytes, magic: bytes) -> tuple[int, int, int]:
    if data[:2] != magic:
        raise NetpbmError(f"expected magic {magic.decode()}, found {data[:2]!r}", 0)
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise NetpbmError("malformed header: expected an integer", start)
        fields.append((int(data[start:pos]), start))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise NetpbmError("malformed header: missing separator before raster", pos)
    (w, _), (h, _), (maxval, mpos) = fields
    if maxval != 255:
        raise NetpbmError(f"unsupported maxval {maxval} (only 255)", mpos)
    if w <= 0 or h <= 0:
        raise NetpbmError("image dimensions must be positive", fields[0][1])
    return w, h, pos + 1


def _decode(data: bytes, magic: bytes, channels: int) -> np.ndarray:
    w, h, start = _parse_header(data, magic)
    need = w * h * channels
    if len(data) - start < need:
        raise NetpbmError(f"truncated raster: need {need} bytes, have {len(data) - start}", len(data))
    arr = np.frombuffer(data, dtype=np.uint8, count=need, offset=start)
    return arr.reshape((h, w, channels) if channels > 1 else (h, w)).copy()


def read_ppm(data: bytes) -> np.ndarray:
    return _decode(data, b"P6", 3)


def read_pgm(data: bytes) -> np.ndarray:
    """Returns the raw gray levels; masks come back as {0, 255}."""
    return _decode(data, b"P5", 1)


# ---------------------------------------------------------------------- dataset on disk
def sequence_seed(base_seed: int, split: str, index: int) -> int:
    """Train and val draw from disjoint seed ranges."""
    offset = {"train": 0, "val": 500_000}[split]
    if index >= 500_000:
        raise ValueError("too many sequences for one split")
    return base_seed * 1_000_000 + offset + index


def write_sequence(seq: VideoSequence, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for k, frame in enumerate(seq.frames):
        (directory / f"frame_{k:04d}.ppm").write_bytes(write_ppm(frame))
        (directory / f"mask_{k:04d}.pgm").write_bytes(write_pgm(seq.masks[k]))
    for k, rgb in enumerate(seq.flow_rgb):
        (directory / f"flow_{k:04d}.ppm").write_bytes(write_ppm(rgb))


def read_sequence(directory: Path) -> VideoSequence:
    """Load frames, flow images and (if present) masks; raw flow is not stored."""
    directory = Path(directory)
    frames = [read_ppm(p.read_bytes()) for p in sorted(directory.glob("frame_*.ppm"))]
    flow_rgb = [read_ppm(p.read_bytes()) for p in sorted(directory.glob("flow_*.ppm"))]
    masks = [(read_pgm(p.read_bytes()) > 127).astype(np.uint8) for p in sorted(directory.glob("mask_*.pgm"))]
    if not frames or len(flow_rgb) != len(frames) - 1:
        raise ValueError(f"{directory}: expected N frames and N-1 flow images")
    h, w = frames[0].shape[:2]
    return VideoSequence(np.stack(frames), np.zeros((len(flow_rgb), h, w, 2)), np.stack(flow_rgb),
                         np.stack(masks) if masks else np.zeros((len(frames), h, w), np.uint8))


def generate_dataset(root: Path, n_train: int, n_val: int, scene: SceneConfig, base_seed: int = 0) -> dict:
    """Write ``<root>/<split>/<seq_id>/...`` plus a manifest per split."""
    root = Path(root)
    counts = {}
    for split, n in (("train", n_train), ("val", n_val)):
        lines = []
        for i in range(n):
            seed = sequence_seed(base_seed, split, i)
            seq = generate_sequence(_with_seed(scene, seed))
            seq_id = f"{split}_{i:05d}"
            write_sequence(seq, root / split / seq_id)
            lines.append(f"{seq_id} {len(seq)} {seed}\n")
        (root / split).mkdir(parents=True, exist_ok=True)
        (root / split / "manifest.txt").write_text("".join(lines))
        counts[split] = n
    return counts


def read_manifest(split_dir: Path) -> list[tuple[str, int, int]]:
    entries = []
    for line in (Path(split_dir) / "manifest.txt").read_text().splitlines():
        if line.strip():
            seq_id, n, seed = line.split()
            entries.append((seq_id, int(n), int(seed)))
    return entries


def _with_seed(scene: SceneConfig, seed: int) -> SceneConfig:
    from dataclasses import replace
    return replace(scene, seed=seed)

