"""Toy siamese encoders and the checkpoint archive format.

``ToyConv`` is three stride-2 conv blocks, adaptive average pooling to a fixed
grid and a linear head.  Flattening the grid keeps *where* a feature was seen,
so nothing in the architecture makes it orientation invariant; any invariance
has to be learned.  Because the grid pooling adapts to the input size, the same
weights encode wide panoramas and square aerial tiles.

``ToyAttention`` patchifies with a learned positional table per input grid,
runs two pre-norm self-attention blocks and mean-pools the tokens.  Its tables
assume a fixed input size, so limited-FoV queries must be zero padded.
"""

import io
import json
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

CHECKPOINT_VERSION = 1
CONV_CHANNELS = (16, 32, 64)
CONV_GRID = (2, 16)


@dataclass
class EncoderConfig:
    backbone: str = "ToyConv"
    embed_dim: int = 32
    share_weights: bool = True
    pad_inputs_to_full: bool = False
    ground_shape: tuple = (32, 128)
    aerial_shape: tuple = (64, 64)
    patch: int = 8
    attn_dim: int = 48
    attn_heads: int = 4

    def __post_init__(self):
        self.ground_shape = tuple(self.ground_shape)
        self.aerial_shape = tuple(self.aerial_shape)
        if self.backbone not in ("ToyConv", "ToyAttention"):
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.embed_dim < 8:
            raise ValueError(f"embed_dim must be >= 8, got {self.embed_dim}")
        if self.backbone == "ToyAttention" and not self.pad_inputs_to_full:
            raise ValueError("ToyAttention has a fixed positional grid and needs pad_inputs_to_full=true")

    def to_dict(self):
        d = asdict(self)
        d["ground_shape"] = list(self.ground_shape)
        d["aerial_shape"] = list(self.aerial_shape)
        return d


class ToyConv(nn.Module):
    def __init__(self, embed_dim, channels=CONV_CHANNELS, grid=CONV_GRID):
        super().__init__()
        layers, cin = [], 3
        for cout in channels:
            layers += [nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.ReLU()]
            cin = cout
        self.body = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(grid)
        self.head = nn.Linear(cin * grid[0] * grid[1], embed_dim)

    def forward(self, x):
        return self.head(self.pool(self.body(x)).flatten(1))


def conv_param_count(embed_dim, channels=CONV_CHANNELS, grid=CONV_GRID):
    n, cin = 0, 3
    for cout in channels:
        n += cin * cout * 9 + cout
        cin = cout
    return n + cin * grid[0] * grid[1] * embed_dim + embed_dim


class _Block(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.n1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.n2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, x):
        h = self.n1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.n2(x))


class ToyAttention(nn.Module):
    def __init__(self, embed_dim, shapes, patch=8, dim=48, heads=4, depth=2):
        super().__init__()
        self.patch = patch
        self.embed = nn.Conv2d(3, dim, patch, stride=patch)
        self.pos = nn.ParameterDict()
        for h, w in shapes:
            key = f"{h}x{w}"
            if key not in self.pos:
                self.pos[key] = nn.Parameter(torch.zeros(1, (h // patch) * (w // patch), dim))
        self.blocks = nn.Sequential(*[_Block(dim, heads) for _ in range(depth)])
        self.norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, embed_dim)

    def forward(self, x):
        key = f"{x.shape[2]}x{x.shape[3]}"
        if key not in self.pos:
            raise ValueError(f"no positional table for input size {key}; pad inputs to a configured size")
        t = self.embed(x).flatten(2).transpose(1, 2) + self.pos[key]
        t = self.norm(self.blocks(t))
        return self.head(t.mean(dim=1))


def _build_branch(cfg, shapes):
    if cfg.backbone == "ToyConv":
        return ToyConv(cfg.embed_dim)
    return ToyAttention(cfg.embed_dim, shapes, cfg.patch, cfg.attn_dim, cfg.attn_heads)


class DualEncoder(nn.Module):
    """Ground and aerial branches; one module when weights are shared."""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        if cfg.share_weights:
            shared = _build_branch(cfg, [cfg.ground_shape, cfg.aerial_shape])
            self.branches = nn.ModuleDict({"shared": shared})
        else:
            self.branches = nn.ModuleDict(
                {
                    "ground": _build_branch(cfg, [cfg.ground_shape]),
                    "aerial": _build_branch(cfg, [cfg.aerial_shape]),
                }
            )

    @property
    def ground(self):
        return self.branches["shared" if self.cfg.share_weights else "ground"]

    @property
    def aerial(self):
        return self.branches["shared" if self.cfg.share_weights else "aerial"]

    def _run(self, branch, images):
        x = to_tensor(images)
        z = branch(x)
        if not torch.isfinite(z).all():
            raise FloatingPointError("encoder produced non-finite activations")
        return F.normalize(z, dim=1)

    def forward_ground(self, images):
        return self._run(self.ground, images)

    def forward_aerial(self, images):
        return self._run(self.aerial, images)


def to_tensor(images):
    """``(N, H, W, C)`` numpy batch (or list of images) to an NCHW float tensor."""
    if isinstance(images, torch.Tensor):
        return images
    if isinstance(images, (list, tuple)):
        shapes = {np.shape(im) for im in images}
        if len(shapes) != 1:
            raise ValueError(f"images in a batch must share one shape, got {sorted(shapes)}")
        images = np.stack(images)
    arr = np.ascontiguousarray(images, dtype=np.float32)
    if arr.ndim != 4:
        raise ValueError(f"expected an (N, H, W, C) batch, got shape {arr.shape}")
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def init_dual_encoder(cfg, seed=0):
    """Build a :class:`DualEncoder` with parameters drawn from ``seed`` only."""
    enc = DualEncoder(cfg)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in enc.named_parameters():
            if name.split(".")[-2:-1] == ["pos"] or ".pos." in name:
                p.copy_(torch.randn(p.shape, generator=gen) * 0.02)
            elif p.ndim > 1:
                fan_in = p[0].numel()
                bound = float(np.sqrt(6.0 / fan_in))
                p.copy_((torch.rand(p.shape, generator=gen) * 2 - 1) * bound)
            elif name.endswith("weight"):
                p.fill_(1.0)
            else:
                p.zero_()
    enc.eval()
    return enc


@torch.no_grad()
def encode(enc, images, branch, batch_size=64):
    """Eval-mode embeddings as a float64 numpy array."""
    fn = enc.forward_ground if branch == "ground" else enc.forward_aerial
    was_training = enc.training
    enc.eval()
    out = []
    for i in range(0, len(images), batch_size):
        out.append(fn(images[i : i + batch_size]).double().numpy())
    enc.train(was_training)
    return np.concatenate(out, axis=0) if out else np.zeros((0, enc.cfg.embed_dim))


def encode_ground(enc, images, batch_size=64):
    return encode(enc, images, "ground", batch_size)


def encode_aerial(enc, images, batch_size=64):
    return encode(enc, images, "aerial", batch_size)


# ---------------------------------------------------------------------------
# checkpoint archive: a numpy .npz holding arrays plus a JSON metadata blob
# ---------------------------------------------------------------------------


def save_archive(path, arrays, meta):
    meta = {"version": CHECKPOINT_VERSION, **meta}
    blob = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, __meta__=blob, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_archive(path):
    with np.load(path, allow_pickle=False) as z:
        if "__meta__" not in z.files:
            raise ValueError(f"{path}: not a checkpoint archive (no metadata)")
        meta = json.loads(bytes(z["__meta__"]).decode("utf-8"))
        arrays = {k: z[k] for k in z.files if k != "__meta__"}
    if "version" not in meta:
        raise ValueError(f"{path}: checkpoint metadata has no version field")
    if meta["version"] > CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {meta['version']} is newer than supported {CHECKPOINT_VERSION}")
    return arrays, meta


def encoder_arrays(enc):
    return {f"param/{k}": v.detach().cpu().numpy().copy() for k, v in enc.state_dict().items()}


def load_encoder_arrays(enc, arrays):
    state = {k[len("param/") :]: torch.from_numpy(np.array(v)) for k, v in arrays.items() if k.startswith("param/")}
    enc.load_state_dict(state, strict=True)


def save_checkpoint(path, enc, loss_cfg=None, extra_arrays=None, extra_meta=None):
    arrays = encoder_arrays(enc)
    if extra_arrays:
        arrays.update(extra_arrays)
    meta = {"encoder": enc.cfg.to_dict(), "loss": loss_cfg.to_dict() if loss_cfg is not None else None}
    if extra_meta:
        meta.update(extra_meta)
    save_archive(path, arrays, meta)


def load_checkpoint(path):
    """Return ``(encoder, arrays, meta)``; the encoder is in eval mode."""
    arrays, meta = load_archive(path)
    cfg = EncoderConfig(**meta["encoder"])
    enc = DualEncoder(cfg)
    load_encoder_arrays(enc, arrays)
    enc.eval()
    return enc, arrays, meta
