"""3D encoder-decoder backbone with an evidential (or plain dose) head.

Each encoder level applies two 3x3x3 convolutions, each followed by ReLU and
dropout, then 2x2x2 max pooling. The bottleneck repeats the double-conv block
at its own width and dropout rate. Decoder levels upsample (nearest
neighbor), concatenate the matching encoder skip, and run the double-conv
block again with the dropout schedule mirrored in reverse. The head is an
8-channel pointwise convolution with ReLU followed by a linear pointwise
convolution onto the output channels (4 NIG channels, or 1 for the baseline
dose head).

Weights are initialized uniformly in +-sqrt(6/fan_in) with zero biases, in
declaration order from the config seed, which is also the checkpoint order.
"""

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from . import evidential
from . import losses

CHECKPOINT_MAGIC = b"EVDW"
CHECKPOINT_VERSION = 1


@dataclass
class NetConfig:
    input_channels: int = 11
    grid_extent: int = 32
    depth: int = 4
    filters: tuple = (8, 16, 32, 64)
    bottleneck: int = 128
    dropout: tuple = (0.10, 0.15, 0.20, 0.25)
    bottleneck_dropout: float = 0.30
    head_hidden: int = 8
    head_out: int = 4
    seed: int = 0

    def __post_init__(self):
        self.filters = tuple(self.filters)
        self.dropout = tuple(self.dropout)
        if len(self.filters) != self.depth:
            raise ValueError(f"need {self.depth} filter counts, got {len(self.filters)}")
        if len(self.dropout) != self.depth:
            raise ValueError(f"need {self.depth} dropout rates, got {len(self.dropout)}")
        if self.grid_extent % (1 << self.depth) != 0:
            raise ValueError(
                f"grid extent {self.grid_extent} not divisible by 2^{self.depth}"
            )


def paper_scale_config():
    """The full-scale configuration (for parameter counting, not training)."""
    return NetConfig(
        input_channels=11,
        grid_extent=128,
        filters=(16, 32, 64, 128),
        bottleneck=256,
    )


@dataclass
class TrainConfig:
    epochs: int = 60
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_mae: float
    val_mae: float


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, case_id, value, trace):
        super().__init__(
            f"non-finite training loss ({value}) at epoch {epoch} on case {case_id}"
        )
        self.epoch = epoch
        self.case_id = case_id
        self.trace = trace


class Network:
    def __init__(self, cfg):
        self.cfg = cfg
        self.params = []
        rng = np.random.default_rng(cfg.seed)

        def conv(cin, cout, k):
            lim = np.sqrt(6.0 / (cin * k * k * k))
            w = rng.uniform(-lim, lim, size=(cout, cin, k, k, k)).astype(np.float32)
            b = np.zeros(cout, dtype=np.float32)
            wn, bn = ad.parameter(w), ad.parameter(b)
            self.params.extend([wn, bn])
            return wn, bn

        c = cfg.input_channels
        self.encoder = []
        for f in cfg.filters:
            self.encoder.append((conv(c, f, 3), conv(f, f, 3)))
            c = f
        self.bottleneck = (conv(c, cfg.bottleneck, 3), conv(cfg.bottleneck, cfg.bottleneck, 3))
        c = cfg.bottleneck
        self.decoder = []
        for f in reversed(cfg.filters):
            self.decoder.append((conv(c + f, f, 3), conv(f, f, 3)))
            c = f
        self.head = (conv(c, cfg.head_hidden, 1), conv(cfg.head_hidden, cfg.head_out, 1))

    def parameter_count(self):
        return sum(p.data.size for p in self.params)

    def forward(self, x, mode="infer", rng=None):
        """Run the network on an input grid; returns the raw head output Node.

        mode 'train' samples dropout from `rng`; 'infer' disables it.
        """
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        training = mode == "train"
        if training and rng is None:
            raise ValueError("train mode needs an rng for dropout sampling")
        x = np.asarray(x, dtype=np.float32)
        expected = (self.cfg.input_channels,) + (self.cfg.grid_extent,) * 3
        if x.shape != expected:
            raise ValueError(f"input shape {x.shape} does not match config {expected}")

        def block(h, convs, rate):
            for w, b in convs:
                h = ad.relu(ad.conv3d(h, w, b, padding="same"))
                h = ad.dropout(h, rate, rng, training)
            return h

        h = ad.constant(x)
        skips = []
        for level, convs in enumerate(self.encoder):
            h = block(h, convs, self.cfg.dropout[level])
            skips.append(h)
            h = ad.maxpool3d(h, 2)
        h = block(h, self.bottleneck, self.cfg.bottleneck_dropout)
        for i, convs in enumerate(self.decoder):
            level = self.cfg.depth - 1 - i
            h = ad.upsample_concat(h, skips[level])
            h = block(h, convs, self.cfg.dropout[level])
        wh, bh = self.head[0]
        h = ad.relu(ad.conv3d(h, wh, bh, padding="same"))
        wo, bo = self.head[1]
        return ad.conv3d(h, wo, bo, padding="same")

    def predict_dose(self, x, mode="infer", rng=None):
        """Physical-space PredictionBundle from one forward pass."""
        raw = self.forward(x, mode, rng).data
        if self.cfg.head_out == 4:
            return evidential.to_physical(evidential.constrain_raw_outputs(raw))
        dose = evidential.logit_to_dose(raw[0]).astype(np.float32)
        zeros = np.zeros_like(dose)
        return evidential.PredictionBundle(dose=dose, aleatoric=zeros, epistemic=zeros.copy(), tag="baseline")


class Adam:
    """Standard Adam with bias correction; moments held at 32-bit."""

    def __init__(self, params, cfg):
        self.params = list(params)
        self.cfg = cfg
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * np.square(g)
            update = (c.lr / bc1) * m / (np.sqrt(v / bc2) + c.eps)
            np.subtract(p.data, update.astype(p.data.dtype), out=p.data)


def masked_mae(dose_pred, dose_gt, mask):
    m = np.asarray(mask, dtype=bool)
    d = np.abs(np.asarray(dose_pred, dtype=np.float64) - np.asarray(dose_gt, dtype=np.float64))
    return float(d[m].mean())


def _case_loss(net, case, target_logit, loss_cfg, mode, rng):
    raw = net.forward(case.input_channels(), mode, rng)
    if net.cfg.head_out == 4:
        loss = losses.batch_loss(raw, target_logit, case.valid_mask, loss_cfg)
    else:
        # baseline dose head: plain squared error in logit space
        target = ad.constant(target_logit[None].astype(raw.data.dtype))
        per_voxel = ad.square(ad.sub(target, raw))
        loss = ad.masked_mean(per_voxel, np.asarray(case.valid_mask, bool)[None])
    return raw, loss


def _dose_from_raw(net, raw_data):
    if net.cfg.head_out == 4:
        return evidential.to_physical(evidential.constrain_raw_outputs(raw_data)).dose
    return evidential.logit_to_dose(raw_data[0]).astype(np.float32)


def train(net, train_cases, val_cases, loss_cfg, train_cfg):
    """Full training loop; returns the per-epoch trace.

    Train MAE is accumulated from the training-mode forwards (dropout
    active); validation MAE uses inference mode. A non-finite loss aborts
    with the partial trace attached.
    """
    if not train_cases:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(train_cfg.seed)
    opt = Adam(net.params, train_cfg)
    targets = {c.id: evidential.dose_to_logit(c.dose_gt).astype(np.float32) for c in train_cases}
    trace = []
    for epoch in range(1, train_cfg.epochs + 1):
        loss_sum = 0.0
        mae_sum = 0.0
        for case in train_cases:
            raw, loss = _case_loss(net, case, targets[case.id], loss_cfg, "train", rng)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(epoch, case.id, value, trace)
            ad.backward(loss)
            opt.step()
            ad.zero_grad(net.params)
            loss_sum += value
            mae_sum += masked_mae(_dose_from_raw(net, raw.data), case.dose_gt, case.valid_mask)
        val_mae = validation_mae(net, val_cases)
        trace.append(
            EpochStats(
                epoch=epoch,
                train_loss=loss_sum / len(train_cases),
                train_mae=mae_sum / len(train_cases),
                val_mae=val_mae,
            )
        )
    return trace


def validation_mae(net, cases):
    if not cases:
        return float("nan")
    total = 0.0
    for case in cases:
        raw = net.forward(case.input_channels(), "infer")
        total += masked_mae(_dose_from_raw(net, raw.data), case.dose_gt, case.valid_mask)
    return total / len(cases)


# ---------------------------------------------------------------------------
# checkpoint format: magic, version u32, length-prefixed JSON config echo,
# then every parameter as little-endian float32 in declaration order

def save_checkpoint(path, net):
    cfg_blob = json.dumps(asdict(net.cfg), sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(cfg_blob)))
        f.write(cfg_blob)
        for p in net.params:
            f.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (n,) = struct.unpack_from("<I", blob, 8)
    cfg = NetConfig(**json.loads(blob[12 : 12 + n].decode("utf-8")))
    net = Network(cfg)
    offset = 12 + n
    expected = offset + 4 * net.parameter_count()
    if len(blob) != expected:
        raise ValueError(
            f"{path}: truncated checkpoint, expected {expected} bytes, got {len(blob)}"
        )
    for p in net.params:
        k = p.data.size
        p.data = np.frombuffer(blob, dtype="<f4", count=k, offset=offset).reshape(p.data.shape).copy()
        offset += 4 * k
    return net
