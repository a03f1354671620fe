"""Multi-task fully convolutional segmentation network (MTFCNet).

One shared 6-stage encoder (strides 2,2,2,2,2,1) feeds two symmetric
decoders, one per task. Each decoder alternates a stride-2 transposed
convolution with a skip-connected convolution that concatenates the
encoder feature of matching resolution, then ends in a 1x1 head:
8 channels for food, 6 for plates. Every convolution except the heads
is followed by batch normalization and ReLU.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .core import FOOD_CLASSES, PLATE_CLASSES, DataError, ProbabilityMaps, RgbdFrame
from .dataio import resize_nearest

log = logging.getLogger(__name__)

TABLE_FILTERS = (16, 32, 64, 128, 256, 512)
DESK_FILTERS = (4, 8, 16, 32, 64, 128)  # width factor 1/4 keeps CPU training fast

PROB_FLOOR = 1e-12


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss becomes non-finite (CLI exit code 3)."""


@dataclass(frozen=True)
class NetworkConfig:
    input_size: tuple[int, int] = (64, 64)
    base_filters: tuple[int, ...] = DESK_FILTERS
    food_classes: int = FOOD_CLASSES
    plate_classes: int = PLATE_CLASSES
    kernel_size: int = 3
    in_channels: int = 4  # RGB + depth
    depth_norm: float = 1.0  # meters mapped to 1.0 in the depth channel

    def __post_init__(self):
        h, w = self.input_size
        if h % 32 or w % 32:
            raise DataError(f"input size {self.input_size} must be divisible by 32")
        if len(self.base_filters) != 6:
            raise DataError("base_filters must list 6 encoder stages")
        if any(f <= 0 for f in self.base_filters):
            raise DataError("encoder filter counts must be positive")
        object.__setattr__(self, "base_filters", tuple(int(f) for f in self.base_filters))
        object.__setattr__(self, "input_size", (int(h), int(w)))

    @classmethod
    def table_scale(cls, input_size=(480, 640)) -> "NetworkConfig":
        return cls(input_size=input_size, base_filters=TABLE_FILTERS)

    def to_json(self) -> str:
        return json.dumps(
            {
                "input_size": list(self.input_size),
                "base_filters": list(self.base_filters),
                "food_classes": self.food_classes,
                "plate_classes": self.plate_classes,
                "kernel_size": self.kernel_size,
                "in_channels": self.in_channels,
                "depth_norm": self.depth_norm,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "NetworkConfig":
        d = json.loads(text)
        return cls(
            input_size=tuple(d["input_size"]),
            base_filters=tuple(d["base_filters"]),
            food_classes=d["food_classes"],
            plate_classes=d["plate_classes"],
            kernel_size=d["kernel_size"],
            in_channels=d["in_channels"],
            depth_norm=d["depth_norm"],
        )


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    batch_size: int = 4
    max_epochs: int = 80
    early_stop_patience: int = 10
    augment: bool = True  # independent left-right / up-down flips, p=0.5 each
    loss_weights: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0:
            raise DataError("learning rate and batch size must be positive")
        if self.max_epochs < 0 or self.early_stop_patience <= 0:
            raise DataError("epoch counts must be non-negative, patience positive")


def _conv_bn(in_ch: int, out_ch: int, kernel: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=kernel // 2),
        nn.BatchNorm2d(out_ch, momentum=0.1),
        nn.ReLU(inplace=True),
    )


def _deconv_bn(in_ch: int, out_ch: int, kernel: int) -> nn.Sequential:
    # stride-2 transposed conv with output padding chosen to exactly double H, W
    return nn.Sequential(
        nn.ConvTranspose2d(in_ch, out_ch, kernel, stride=2, padding=kernel // 2, output_padding=1),
        nn.BatchNorm2d(out_ch, momentum=0.1),
        nn.ReLU(inplace=True),
    )


class _Decoder(nn.Module):
    """Five up-stages restoring input resolution, then a 1x1 softmax head."""

    def __init__(self, filters: tuple[int, ...], kernel: int, n_classes: int):
        super().__init__()
        f1, f2, f3, f4, f5, f6 = filters
        up_filters = (f6, f5, f4, f3, f2)
        skip_sources = (f4, f3, f2, f1)
        self.deconvs = nn.ModuleList()
        self.skip_convs = nn.ModuleList()
        in_ch = f6
        for i, out_ch in enumerate(up_filters):
            self.deconvs.append(_deconv_bn(in_ch, out_ch, kernel))
            if i < 4:
                self.skip_convs.append(_conv_bn(out_ch + skip_sources[i], out_ch, kernel, 1))
            in_ch = out_ch
        self.head = nn.Conv2d(up_filters[-1], n_classes, kernel_size=1)

    def forward(self, bottleneck, skips):
        x = bottleneck
        for i, deconv in enumerate(self.deconvs):
            x = deconv(x)
            if i < 4:
                x = self.skip_convs[i](torch.cat([x, skips[i]], dim=1))
        return self.head(x)


class MTFCNet(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        f = config.base_filters
        k = config.kernel_size
        strides = (2, 2, 2, 2, 2, 1)
        chans = (config.in_channels,) + f
        self.encoder = nn.ModuleList(
            _conv_bn(chans[i], chans[i + 1], k, strides[i]) for i in range(6)
        )
        self.decode_food = _Decoder(f, k, config.food_classes)
        self.decode_plate = _Decoder(f, k, config.plate_classes)

    def forward(self, x):
        feats = []
        for stage in self.encoder:
            x = stage(x)
            feats.append(x)
        # decoders consume encoder features at matching resolution:
        # after up-stage i the map is at the resolution of encoder stage 4-i
        skips = (feats[3], feats[2], feats[1], feats[0])
        return self.decode_food(feats[5], skips), self.decode_plate(feats[5], skips)


def build_network(config: NetworkConfig, seed: int) -> MTFCNet:
    """Deterministically initialized network; same seed gives identical weights."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = MTFCNet(config)
    return net


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def frame_input(frame: RgbdFrame, config: NetworkConfig) -> np.ndarray:
    """4-channel network input: RGB in [0,1], depth scaled, invalid depth = 0."""
    h, w = config.input_size
    color = resize_nearest(frame.color, (h, w)).astype(np.float32) / 255.0
    depth = resize_nearest(frame.depth, (h, w)).astype(np.float32) / config.depth_norm
    return np.concatenate([color.transpose(2, 0, 1), depth[None]], axis=0)


def forward(net: MTFCNet, batch: np.ndarray | torch.Tensor) -> list[ProbabilityMaps]:
    """Run inference on a (N, 4, H, W) batch and return per-sample softmax maps."""
    cfg = net.config
    x = torch.as_tensor(np.asarray(batch))
    if x.ndim == 3:
        x = x[None]
    if x.shape[1] != cfg.in_channels or tuple(x.shape[2:]) != cfg.input_size:
        raise DataError(
            f"batch shape {tuple(x.shape)} does not match configured input "
            f"{cfg.in_channels}x{cfg.input_size[0]}x{cfg.input_size[1]}"
        )
    dtype = next(net.parameters()).dtype
    net.eval()
    with torch.no_grad():
        food_logits, plate_logits = net(x.to(dtype))
        food = torch.softmax(food_logits, dim=1).permute(0, 2, 3, 1).numpy()
        plate = torch.softmax(plate_logits, dim=1).permute(0, 2, 3, 1).numpy()
    return [ProbabilityMaps(food=f, plate=p) for f, p in zip(food, plate)]


def loss(pred: ProbabilityMaps, gt_food, gt_plate, weights=(1.0, 1.0)) -> float:
    """Weighted categorical cross-entropy of probability maps, averaged per pixel."""
    w_f, w_p = weights
    total = 0.0
    for w, probs, gt in ((w_f, pred.food, gt_food), (w_p, pred.plate, gt_plate)):
        labels = gt.labels if hasattr(gt, "labels") else np.asarray(gt)
        if probs.shape[:2] != labels.shape:
            raise DataError(f"prediction {probs.shape[:2]} vs labels {labels.shape}")
        picked = np.take_along_axis(probs, labels[..., None].astype(np.intp), axis=2)[..., 0]
        total += w * float(-np.log(np.maximum(picked, PROB_FLOOR)).mean())
    return total


def _loss_logits(food_logits, plate_logits, gt_food, gt_plate, weights) -> torch.Tensor:
    w_f, w_p = weights
    return w_f * F.cross_entropy(food_logits, gt_food) + w_p * F.cross_entropy(
        plate_logits, gt_plate
    )


@dataclass
class SegmentationData:
    """Arrays ready for the trainer: inputs (N,4,H,W), labels (N,H,W)."""

    inputs: np.ndarray
    food_labels: np.ndarray
    plate_labels: np.ndarray

    def __post_init__(self):
        if not len(self.inputs) == len(self.food_labels) == len(self.plate_labels):
            raise DataError("inputs and label arrays must have equal length")
        if len(self.inputs) == 0:
            raise DataError("empty dataset")

    def __len__(self) -> int:
        return len(self.inputs)

    def tensors(self, dtype=torch.float32):
        return (
            torch.as_tensor(self.inputs, dtype=dtype),
            torch.as_tensor(self.food_labels, dtype=torch.long),
            torch.as_tensor(self.plate_labels, dtype=torch.long),
        )


def _epoch_loss(net, x, yf, yp, weights, batch_size) -> float:
    net.eval()
    total = 0.0
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            sl = slice(i, i + batch_size)
            fl, pl = net(x[sl])
            total += float(_loss_logits(fl, pl, yf[sl], yp[sl], weights)) * (len(x[sl]) / len(x))
    return total


def train(net: MTFCNet, train_set: SegmentationData, val_set: SegmentationData,
          cfg: TrainConfig, seed: int):
    """Adam training with early stopping on validation loss.

    Returns (network restored to the best-validation epoch, history dict with
    per-epoch "train_loss" and "val_loss" lists). Deterministic in `seed`.
    """
    gen = torch.Generator().manual_seed(seed)
    x, yf, yp = train_set.tensors()
    vx, vyf, vyp = val_set.tensors()
    history = {"train_loss": [], "val_loss": []}
    if cfg.max_epochs == 0:
        log.warning("max_epochs=0: returning initialized weights without training")
        return net, history

    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate,
                           betas=(0.9, 0.999), eps=1e-8)
    best_val = math.inf
    best_state = copy.deepcopy(net.state_dict())
    epochs_since_best = 0

    for epoch in range(cfg.max_epochs):
        net.train()
        order = torch.randperm(len(x), generator=gen)
        running = 0.0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            bx, bf, bp = x[idx], yf[idx], yp[idx]
            if cfg.augment:
                flips = torch.rand(len(idx), 2, generator=gen) < 0.5
                for j in range(len(idx)):
                    dims = [d for d, on in zip((-1, -2), flips[j]) if on]
                    if dims:
                        bx[j] = torch.flip(bx[j], dims)
                        bf[j] = torch.flip(bf[j], dims)
                        bp[j] = torch.flip(bp[j], dims)
            opt.zero_grad()
            fl, pl = net(bx)
            batch_loss = _loss_logits(fl, pl, bf, bp, cfg.loss_weights)
            if not torch.isfinite(batch_loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch + 1}, batch {i // cfg.batch_size}"
                )
            batch_loss.backward()
            opt.step()
            running += batch_loss.item() * (len(idx) / len(order))
        val = _epoch_loss(net, vx, vyf, vyp, cfg.loss_weights, cfg.batch_size)
        history["train_loss"].append(running)
        history["val_loss"].append(val)
        if val < best_val:
            best_val = val
            best_state = copy.deepcopy(net.state_dict())
            epochs_since_best = 0
        else:
            epochs_since_best += 1
        if epochs_since_best >= cfg.early_stop_patience:
            break

    net.load_state_dict(best_state)
    return net, history


def pixel_accuracy(net: MTFCNet, data: SegmentationData) -> tuple[float, float]:
    """Argmax pixel accuracy of the food and plate heads over a dataset."""
    x, yf, yp = data.tensors(dtype=next(net.parameters()).dtype)
    net.eval()
    with torch.no_grad():
        fl, pl = net(x)
        acc_f = float((fl.argmax(1) == yf).float().mean())
        acc_p = float((pl.argmax(1) == yp).float().mean())
    return acc_f, acc_p


def gradient_check(net: MTFCNet, sample, epsilon: float = 1e-5,
                   num_params: int = 100, seed: int = 0,
                   weights=(1.0, 1.0)) -> float:
    """Max relative error of analytic gradients vs central finite differences.

    Runs in float64 on a random parameter subset that always includes
    batch-norm scale/shift entries. The sample is (input, food_gt, plate_gt).

    The loss is only piecewise smooth: when a ReLU kink falls inside the
    difference window the central difference stops being a gradient oracle.
    Such parameters are detected by comparing steps epsilon and epsilon/2
    (which must agree to truncation order on smooth stretches) and are
    resampled, so the reported error measures backpropagation, not kink
    placement.
    """
    inputs, gt_food, gt_plate = sample
    net = net.double()
    net.train()
    x = torch.as_tensor(np.asarray(inputs), dtype=torch.float64)
    if x.ndim == 3:
        x = x[None]
    yf = torch.as_tensor(np.asarray(gt_food), dtype=torch.long).reshape(len(x), *x.shape[2:])
    yp = torch.as_tensor(np.asarray(gt_plate), dtype=torch.long).reshape(len(x), *x.shape[2:])

    def eval_loss() -> torch.Tensor:
        fl, pl = net(x)
        return _loss_logits(fl, pl, yf, yp, weights)

    net.zero_grad()
    eval_loss().backward()
    params = list(net.parameters())
    grads = [p.grad.detach().clone() for p in params]

    rng = np.random.default_rng(seed)
    bn_param_ids = {
        id(p)
        for m in net.modules()
        if isinstance(m, nn.BatchNorm2d)
        for p in m.parameters(recurse=False)
    }
    bn_tensors = [i for i, p in enumerate(params) if id(p) in bn_param_ids]
    sizes = np.array([p.numel() for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def central(ti: int, j: int, eps: float) -> float:
        flat = params[ti].view(-1)
        orig = float(flat[j])
        flat[j] = orig + eps
        loss_hi = float(eval_loss())
        flat[j] = orig - eps
        loss_lo = float(eval_loss())
        flat[j] = orig
        return (loss_hi - loss_lo) / (2 * eps)

    def candidates():
        for ti in bn_tensors[:8]:
            yield ti, int(rng.integers(params[ti].numel()))
        while True:
            flat = int(rng.integers(int(sizes.sum())))
            ti = int(np.searchsorted(offsets, flat, side="right") - 1)
            yield ti, int(flat - offsets[ti])

    max_rel = 0.0
    checked = 0
    attempts = 0
    with torch.no_grad():
        for ti, j in candidates():
            attempts += 1
            if attempts > 20 * num_params:
                raise RuntimeError("gradient check could not find enough smooth parameters")
            fd = central(ti, j, epsilon)
            fd_half = central(ti, j, epsilon / 2.0)
            if abs(fd - fd_half) > 1e-5 * max(abs(fd), abs(fd_half), 1e-8):
                continue  # kink inside the window: the oracle is invalid here
            analytic = float(grads[ti].view(-1)[j])
            rel = abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-10)
            max_rel = max(max_rel, rel)
            checked += 1
            if checked >= num_params:
                break
    return max_rel


def save_checkpoint(net: MTFCNet, seed: int, path) -> None:
    """Self-describing npz: config JSON, seed, and all named state tensors."""
    arrays = {"state/" + k: v.detach().cpu().numpy() for k, v in net.state_dict().items()}
    np.savez(
        path,
        config_json=np.asarray(net.config.to_json()),
        seed=np.asarray(int(seed)),
        **arrays,
    )


def load_checkpoint(path) -> tuple[MTFCNet, int]:
    try:
        data = np.load(path, allow_pickle=False)
    except FileNotFoundError:
        raise DataError(f"missing checkpoint: {path}")
    config = NetworkConfig.from_json(str(data["config_json"]))
    seed = int(data["seed"])
    net = MTFCNet(config)
    state = {}
    for key in data.files:
        if key.startswith("state/"):
            ref = net.state_dict()[key[len("state/"):]]
            state[key[len("state/"):]] = torch.as_tensor(data[key]).to(ref.dtype)
    net.load_state_dict(state)
    net.eval()
    return net, seed
