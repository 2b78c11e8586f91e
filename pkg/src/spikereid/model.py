"""Full network assembly (stem -> SEW stages -> attention insertions ->
descriptor branches), Adam training loop, dataset loading, and binary
checkpointing."""

import json
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as tt
from .events import SensorGeometry, bin_events, parse_event_file
from .layers import BatchNorm2d, Conv2d, Linear, Module
from .losses import LossWeights, total_loss
from .retrieval import compute_map_cmc, cosine_sim_matrix
from .seeding import component_rng, derive_seed
from .spiking import LIFLayer, LIFParams, SEWBlock, SurrogateSpec
from .ssam import AttentionStage
from .stfs import BranchDescriptors, SamplerSeed, global_descriptor, sample_spatial, sample_temporal


class NumericsError(RuntimeError):
    """Training produced a non-finite loss."""


class CheckpointFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    time_steps: int = 8
    height: int = 48
    width: int = 24
    widths: tuple = (16, 32, 64, 128)
    blocks: tuple = (1, 1, 1, 1)
    num_classes: int = 8
    ssam_stages: tuple = ("shallow", "deep")
    ssam_variant: str = "staw"
    ssam_value_mode: str = "literal"
    ssam_residual: bool = True
    stfs_enabled: bool = True
    stfs_temporal: bool = True
    stfs_spatial: bool = True
    lambda1: float = 1.0
    lambda2: float = 0.1
    margin: float = 0.3
    epsilon: float = 0.1
    batch_p: int = 4
    batch_k: int = 4
    epochs: int = 100
    lr: float = 3.5e-4
    lr_decay_every: int = 30
    lr_decay_factor: float = 1.0 / 3.0
    eval_every: int = 1
    holdout_per_cam: int = 2
    batches_per_epoch: int = 0
    surrogate_a: float = 1.0
    window_us: int = 0
    bin_clip: float = 0.0

    def loss_weights(self):
        return LossWeights(self.lambda1, self.lambda2, self.margin, self.epsilon)


class HeadBank(Module):
    """One linear classifier per descriptor branch type."""

    def __init__(self, channels, num_classes, rng):
        super().__init__()
        self.temporal = Linear(channels, num_classes, rng)
        self.spatial = Linear(channels, num_classes, rng)
        self.global_head = Linear(channels, num_classes, rng)

    def __getitem__(self, name):
        return {"temporal": self.temporal, "spatial": self.spatial,
                "global": self.global_head}[name]


class BackboneStage(Module):
    def __init__(self, cin, cout, n_blocks, stride, rng, lif_params, surrogate):
        super().__init__()
        self.n_blocks = n_blocks
        for i in range(n_blocks):
            block = SEWBlock(cin if i == 0 else cout, cout,
                             stride=stride if i == 0 else 1,
                             rng=rng, lif_params=lif_params, surrogate=surrogate)
            setattr(self, f"block{i}", block)

    def forward(self, x, time_steps):
        for i in range(self.n_blocks):
            x = getattr(self, f"block{i}")(x, time_steps)
        return x


class SpikingReIDNet(Module):
    """Spiking backbone with causal attention insertions and descriptor heads.

    Input is a (T*B, 2, H, W) event-count tensor, time-major on axis 0.
    Training mode returns BranchDescriptors; eval mode returns the (B, C)
    global descriptor, the only representation used for matching.
    """

    def __init__(self, cfg, rng=None):
        super().__init__()
        self.cfg = cfg
        rng = rng or np.random.default_rng(0)
        lif = LIFParams()
        surr = SurrogateSpec(a=cfg.surrogate_a)
        self.lif_params = lif
        self.surrogate = surr
        w = cfg.widths
        self.stem_conv = Conv2d(2, w[0], 3, stride=1, padding=1, rng=rng)
        self.stem_bn = BatchNorm2d(w[0])
        self.stem_lif = LIFLayer(lif, surr)
        h, wd = cfg.height, cfg.width
        cin = w[0]
        for i in range(4):
            setattr(self, f"stage{i + 1}",
                    BackboneStage(cin, w[i], cfg.blocks[i], 2, rng, lif, surr))
            cin = w[i]
            h = (h + 2 - 3) // 2 + 1
            wd = (wd + 2 - 3) // 2 + 1
            if i == 1:
                self.shallow_dims = (w[1], h, wd)
            if i == 3:
                self.deep_dims = (w[3], h, wd)
        if "shallow" in cfg.ssam_stages:
            self.ssam_shallow = AttentionStage(
                *self.shallow_dims, rng=rng, variant=cfg.ssam_variant,
                value_mode=cfg.ssam_value_mode, residual=cfg.ssam_residual,
                lif_params=lif, surrogate=surr)
        if "deep" in cfg.ssam_stages:
            self.ssam_deep = AttentionStage(
                *self.deep_dims, rng=rng, variant=cfg.ssam_variant,
                value_mode=cfg.ssam_value_mode, residual=cfg.ssam_residual,
                lif_params=lif, surrogate=surr)
        self.heads = HeadBank(w[3], cfg.num_classes, rng)

    @property
    def feature_dim(self):
        return self.cfg.widths[3]

    def forward_features(self, x, capture=None):
        t = self.cfg.time_steps
        x = tt.as_tensor(x)
        if x.shape[0] % t != 0 or x.shape[1] != 2 or x.shape[2:] != (self.cfg.height, self.cfg.width):
            raise ValueError(f"input {x.shape} does not match configured geometry "
                             f"(T={t}, 2x{self.cfg.height}x{self.cfg.width})")
        out = self.stem_lif(self.stem_bn(self.stem_conv(x)), t)
        if capture is not None:
            capture["stem"] = out.data
        for i in range(1, 5):
            out = getattr(self, f"stage{i}")(out, t)
            if capture is not None:
                capture[f"stage{i}"] = out.data
            if i == 2 and hasattr(self, "ssam_shallow"):
                if capture is not None:
                    capture["ssam_shallow_input"] = out.data
                out = self.ssam_shallow(out, t)
                if capture is not None:
                    capture["ssam_shallow"] = out.data
            if i == 4 and hasattr(self, "ssam_deep"):
                if capture is not None:
                    capture["ssam_deep_input"] = out.data
                out = self.ssam_deep(out, t)
                if capture is not None:
                    capture["ssam_deep"] = out.data
        return out

    def forward(self, x, sampler=None):
        t = self.cfg.time_steps
        feats = self.forward_features(x)
        if not self.training:
            return global_descriptor(feats, time_steps=t)
        cfg = self.cfg
        temporal, spatial = [], []
        if cfg.stfs_enabled and cfg.stfs_temporal:
            if sampler is None:
                raise ValueError("training forward with temporal sampling needs a sampler")
            temporal = sample_temporal(feats, sampler, time_steps=t)
        if cfg.stfs_enabled and cfg.stfs_spatial:
            if sampler is None:
                raise ValueError("training forward with spatial sampling needs a sampler")
            spatial = sample_spatial(feats, sampler, time_steps=t)
        return BranchDescriptors(temporal=temporal, spatial=spatial,
                                 global_vec=global_descriptor(feats, time_steps=t))


class Adam:
    """Adaptive-moment optimizer with bias correction."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * (g * g)
            mhat = self.m[i] / bc1
            vhat = self.v[i] / bc2
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# -- checkpoint format ---------------------------------------------------------
#
# little-endian: magic "S3CE", u32 version=1, u32 block count, then per block
# u16 name length, UTF-8 name, u8 ndim, u32 dims[], f32 data[]; trailing u32
# epoch. The model configuration snapshot travels in a JSON sidecar
# ("<path>.config.json") because the binary layout has no config section.

MAGIC = b"S3CE"
VERSION = 1


def checkpoint_blocks(net):
    """Ordered (name, array) blocks: parameters then buffers."""
    blocks = list(net.named_parameters())
    blocks += [(n, b) for n, b in net.named_buffers()]
    return [(n, (p.data if isinstance(p, tt.Tensor) else p)) for n, p in blocks]


def save_checkpoint(path, net, cfg, epoch):
    blocks = checkpoint_blocks(net)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blocks)))
        for name, arr in blocks:
            nb = name.encode("utf-8")
            arr = np.asarray(arr, dtype="<f4")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
        fh.write(struct.pack("<I", int(epoch)))
    with open(path + ".config.json", "w", encoding="utf-8") as fh:
        json.dump({"config": config_to_dict(cfg), "epoch": int(epoch)}, fh, indent=1)
    return path


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointFormatError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path):
    """-> (blocks dict name->float32 array, epoch, config dict or None)."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise CheckpointFormatError("bad checkpoint magic")
        version, count = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        blocks = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, nlen, "name").decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1, "ndim"))
            dims = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "dims"))
            size = int(np.prod(dims)) if ndim else 1
            data = np.frombuffer(_read_exact(fh, 4 * size, f"block {name}"), dtype="<f4")
            blocks[name] = data.reshape(dims).copy()
        (epoch,) = struct.unpack("<I", _read_exact(fh, 4, "epoch"))
    cfg_dict = None
    sidecar = path + ".config.json"
    if os.path.exists(sidecar):
        with open(sidecar, "r", encoding="utf-8") as fh:
            cfg_dict = json.load(fh)["config"]
    return blocks, epoch, cfg_dict


def config_to_dict(cfg):
    d = {}
    for f in cfg.__dataclass_fields__:
        v = getattr(cfg, f)
        d[f] = list(v) if isinstance(v, tuple) else v
    return d


def config_from_dict(d):
    kwargs = dict(d)
    for key in ("widths", "blocks", "ssam_stages"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    return ModelConfig(**kwargs)


def apply_checkpoint(net, blocks):
    named = dict(net.named_parameters())
    for name, p in named.items():
        if name not in blocks:
            raise CheckpointFormatError(f"checkpoint missing parameter {name}")
        if blocks[name].shape != p.data.shape:
            raise CheckpointFormatError(
                f"shape mismatch for {name}: {blocks[name].shape} vs {p.data.shape}")
        p.data = blocks[name].astype(p.data.dtype)
    for name, _ in net.named_buffers():
        if name in blocks:
            parts = name.split(".")
            mod = net
            for part in parts[:-1]:
                mod = getattr(mod, part)
            mod.set_buffer(parts[-1], blocks[name].astype(tt.get_default_dtype()))
    return net


def net_from_checkpoint(path):
    blocks, epoch, cfg_dict = load_checkpoint(path)
    if cfg_dict is None:
        raise CheckpointFormatError(f"missing config sidecar for {path}")
    cfg = config_from_dict(cfg_dict)
    net = SpikingReIDNet(cfg)
    apply_checkpoint(net, blocks)
    return net, cfg, epoch


# -- dataset -------------------------------------------------------------------


@dataclass
class SequenceRecord:
    identity: int
    camera: int
    seq: int
    path: str
    tensor: np.ndarray    # (T, 2, H, W) float32


class EventReIDDataset:
    """Binned sequences from a ``<root>/<id>/<cam>/<seq>.events`` tree."""

    def __init__(self, records, cfg):
        self.records = records
        self.cfg = cfg
        self.ids = sorted({r.identity for r in records})
        self.id_to_label = {i: k for k, i in enumerate(self.ids)}

    @classmethod
    def load(cls, root, cfg):
        geom = SensorGeometry(width=cfg.width, height=cfg.height)
        records = []
        for id_name in sorted(os.listdir(root)):
            id_dir = os.path.join(root, id_name)
            if not os.path.isdir(id_dir):
                continue
            for cam_name in sorted(os.listdir(id_dir)):
                cam_dir = os.path.join(id_dir, cam_name)
                if not os.path.isdir(cam_dir):
                    continue
                for fname in sorted(os.listdir(cam_dir)):
                    if not fname.endswith(".events"):
                        continue
                    path = os.path.join(cam_dir, fname)
                    stream = parse_event_file(path, geom)
                    if cfg.window_us > 0:
                        window = cfg.window_us
                    else:
                        span = int(stream.t[-1] - stream.t[0]) if len(stream) else 1
                        window = span // cfg.time_steps + 1
                    seq = bin_events(stream, cfg.time_steps, window, geom,
                                     clip=cfg.bin_clip if cfg.bin_clip > 0 else None)
                    records.append(SequenceRecord(
                        identity=int(id_name), camera=int(cam_name),
                        seq=int(fname.split(".")[0]),
                        path=path, tensor=seq.data.astype(np.float32)))
        if not records:
            raise ValueError(f"no .events sequences found under {root}")
        return cls(records, cfg)

    def labels(self, indices):
        return np.array([self.id_to_label[self.records[i].identity] for i in indices])

    def split(self, holdout_per_cam):
        """Deterministic split: the last ``holdout_per_cam`` sequences of each
        (identity, camera) group are held out for evaluation."""
        groups = {}
        for idx, r in enumerate(self.records):
            groups.setdefault((r.identity, r.camera), []).append(idx)
        train_idx, eval_idx = [], []
        for key in sorted(groups):
            members = sorted(groups[key], key=lambda i: self.records[i].seq)
            cut = max(len(members) - holdout_per_cam, 1)
            train_idx.extend(members[:cut])
            eval_idx.extend(members[cut:])
        return train_idx, eval_idx

    def batch_tensor(self, indices):
        """Stack sequences time-major: (T*B, 2, H, W)."""
        stacked = np.stack([self.records[i].tensor for i in indices], axis=1)
        t, b = stacked.shape[0], stacked.shape[1]
        return stacked.reshape(t * b, *stacked.shape[2:]).astype(tt.get_default_dtype())


def pk_batches(dataset, train_idx, p, k, rng, n_batches):
    """Identity-balanced batches: p identities x k sequences each."""
    by_id = {}
    for idx in train_idx:
        by_id.setdefault(dataset.records[idx].identity, []).append(idx)
    ids = sorted(by_id)
    if len(ids) < p or min(len(v) for v in by_id.values()) < 2:
        raise ValueError(f"dataset too small for P={p} x K={k} batching")
    batches = []
    pool = []
    while len(batches) < n_batches:
        if len(pool) < p:
            pool = list(rng.permutation(ids))
        chosen = [pool.pop() for _ in range(p)]
        batch = []
        for ident in chosen:
            members = by_id[ident]
            replace_draw = len(members) < k
            batch.extend(rng.choice(members, size=k, replace=replace_draw))
        batches.append(np.array(batch, dtype=int))
    return batches


# -- training -------------------------------------------------------------------


def embed_split(net, dataset, indices, batch_size=16):
    """Eval-mode global descriptors for the given sequence indices."""
    net.eval()
    t = net.cfg.time_steps
    vecs = []
    with tt.no_grad():
        for lo in range(0, len(indices), batch_size):
            chunk = indices[lo:lo + batch_size]
            x = dataset.batch_tensor(chunk)
            vecs.append(net.forward(x).data.astype(np.float64))
    ids = np.array([dataset.records[i].identity for i in indices])
    cams = np.array([dataset.records[i].camera for i in indices])
    return np.concatenate(vecs, axis=0), ids, cams


def evaluate_split(net, dataset, indices):
    emb, ids, cams = embed_split(net, dataset, indices)
    sim = cosine_sim_matrix(emb, emb)
    return compute_map_cmc(sim, ids, cams, ids, cams)


def train_epoch(net, dataset, train_idx, optimizer, sampler, cfg, rng, n_batches):
    """One optimizer pass over identity-balanced batches; returns mean losses."""
    net.train()
    weights = cfg.loss_weights()
    batches = pk_batches(dataset, train_idx, cfg.batch_p, cfg.batch_k, rng, n_batches)
    tot, tri, cls = [], [], []
    for batch in batches:
        x = dataset.batch_tensor(batch)
        labels = dataset.labels(batch)
        optimizer.zero_grad()
        branches = net.forward(x, sampler=sampler)
        loss, parts = total_loss(branches, net.heads, labels, weights)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericsError(f"non-finite loss {value}")
        loss.backward()
        optimizer.step()
        tot.append(value)
        tri.append(parts["loss_tri"])
        cls.append(parts["loss_cls"])
    return {"loss_total": float(np.mean(tot)), "loss_tri": float(np.mean(tri)),
            "loss_cls": float(np.mean(cls))}


METRICS_HEADER = "epoch,loss_total,loss_tri,loss_cls,map,rank1"


def format_metrics_row(epoch, losses, result=None):
    row = [str(epoch), f"{losses['loss_total']:.6f}",
           f"{losses['loss_tri']:.6f}", f"{losses['loss_cls']:.6f}"]
    if result is None:
        row += ["", ""]
    else:
        row += [f"{result.map:.6f}", f"{result.rank1:.6f}"]
    return ",".join(row)


def train_model(dataset, cfg, seed, out_dir=None, epochs=None, quiet=True):
    """Train from scratch; returns (net, history rows, final RetrievalResult).

    Writes ``metrics.csv`` and ``checkpoint.bin`` under out_dir when given.
    Deterministic for a fixed (dataset, cfg, seed).
    """
    epochs = cfg.epochs if epochs is None else epochs
    train_idx, eval_idx = dataset.split(cfg.holdout_per_cam)
    net = SpikingReIDNet(cfg, rng=component_rng(seed, "init"))
    optimizer = Adam(net.parameters(), lr=cfg.lr)
    sampler = SamplerSeed(derive_seed(seed, "stfs"))
    rows = [METRICS_HEADER]
    n_batches = cfg.batches_per_epoch
    if n_batches <= 0:
        n_batches = max(1, int(np.ceil(len(train_idx) / (cfg.batch_p * cfg.batch_k))))
    result = None
    for epoch in range(1, epochs + 1):
        optimizer.lr = cfg.lr * (cfg.lr_decay_factor ** ((epoch - 1) // cfg.lr_decay_every))
        epoch_rng = component_rng(seed, "batches", epoch)
        losses = train_epoch(net, dataset, train_idx, optimizer, sampler, cfg,
                             epoch_rng, n_batches)
        do_eval = (epoch % cfg.eval_every == 0) or epoch == epochs
        result = evaluate_split(net, dataset, eval_idx) if do_eval else None
        rows.append(format_metrics_row(epoch, losses, result))
        if not quiet:
            print(rows[-1])
    if result is None:
        result = evaluate_split(net, dataset, eval_idx)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "metrics.csv"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(rows) + "\n")
        save_checkpoint(os.path.join(out_dir, "checkpoint.bin"), net, cfg, epochs)
    return net, rows, result
