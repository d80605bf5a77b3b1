"""Offline end-to-end training on paired RGB-T sequences.

Each episode draws ``n_frames`` training frames from the first half of a
segment and ``n_frames`` test frames from the second half. Filters are
learned on the training frames and scored on the test frames; the IoU head
is trained on jittered proposals around the test boxes.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import extend_first_layer, load_checkpoint, save_checkpoint
from .data_model import BoundingBox, SampleSet, Sequence, iou_array
from .fusion import FusionConfig
from .iou_net import iou_regression_loss, pixel_to_feature_boxes
from .model_predictor import classification_loss
from .network import ModelConfig, TrackerNet
from .tracker import crop_search_region, patches_to_tensor, rgbt_image

GROUPS = ("backbone_rgb", "backbone_tir", "backbone_fused", "predictor", "iou_head")
# component name used by ablation rows -> learning-rate groups
COMPONENT_GROUPS = {"backbone": ("backbone_rgb", "backbone_tir", "backbone_fused"),
                    "predictor": ("predictor",), "iou": ("iou_head",)}
LOSS_COLUMNS = ("step", "L_cls", "L_iou", "L_total")


@dataclass(frozen=True)
class TrainConfig:
    n_frames: int = 3
    batch_size: int = 4
    steps: int = 1000
    lr_backbone_rgb: float = 0.01
    lr_backbone_tir: float = 0.01
    lr_predictor: float = 0.01
    lr_iou_head: float = 0.05
    momentum: float = 0.9
    finetune_gain: float = 0.001
    beta: float = 1.0
    num_proposals: int = 16
    proposal_sigma: float = 0.15
    center_jitter: float = 0.5
    scale_jitter: float = 0.5
    segment_length: int = 0  # 0: whole sequence
    grad_clip: float = 10.0
    checkpoint_every: int = 100
    seed: int = 0

    def __post_init__(self):
        for k in ("lr_backbone_rgb", "lr_backbone_tir", "lr_predictor", "lr_iou_head",
                  "finetune_gain"):
            if getattr(self, k) <= 0:
                raise ValueError(f"{k} must be positive")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.n_frames < 1 or self.batch_size < 1 or self.steps < 0:
            raise ValueError("n_frames, batch_size >= 1 and steps >= 0 required")

    def base_rate(self, group: str) -> float:
        if group == "backbone_tir":
            return self.lr_backbone_tir
        if group.startswith("backbone"):
            return self.lr_backbone_rgb
        return self.lr_predictor if group == "predictor" else self.lr_iou_head


@dataclass(frozen=True)
class Episode:
    train: SampleSet
    test: SampleSet
    sequence: str
    train_indices: tuple = ()
    test_indices: tuple = ()


def sample_episode(seq: Sequence, n_frames: int, rng: np.random.Generator,
                   segment_length: int = 0) -> Episode:
    """Training frames from the first half of a segment, test frames from the second."""
    L = len(seq)
    if L < 2 * n_frames:
        raise ValueError(f"{seq.name}: {L} frames is too short for 2 x {n_frames} samples")
    if segment_length and segment_length < L:
        seg = max(segment_length, 2 * n_frames)
        start = int(rng.integers(0, L - seg + 1))
    else:
        seg, start = L, 0
    half = seg // 2
    tr = np.sort(rng.choice(half, n_frames, replace=False)) + start
    te = np.sort(rng.choice(seg - half, n_frames, replace=False)) + start + half
    items = lambda idx: [(seq.frames[i], seq.groundtruth[i]) for i in idx]
    return Episode(SampleSet(items(tr)), SampleSet(items(te)), seq.name,
                   tuple(int(i) for i in tr), tuple(int(i) for i in te))


# ------------------------------------------------------------ learning rates

def effective_rates(config: TrainConfig, fusion: FusionConfig, groups,
                    finetune: frozenset | None = None, pretrained=()) -> dict:
    """Learning rate per group.

    ``finetune`` is ``None`` for training from scratch. Otherwise it names the
    components that are updated; groups in ``pretrained`` get the fine-tune
    gain, freshly initialized groups keep the base rate, and groups of
    components outside ``finetune`` are frozen (rate 0). The TIR backbone is
    additionally scaled by ``fusion.tir_lr_multiplier``.
    """
    trainable = set(groups)
    if finetune is not None:
        trainable = {g for c in finetune for g in COMPONENT_GROUPS[c]} & set(groups)
    rates = {}
    for g in groups:
        if g not in trainable:
            rates[g] = 0.0
            continue
        r = config.base_rate(g)
        if finetune is not None and g in pretrained:
            r *= config.finetune_gain
        if g == "backbone_tir":
            r *= fusion.tir_lr_multiplier
        rates[g] = r
    return rates


def make_optimizer(net: TrackerNet, rates: dict, momentum: float) -> torch.optim.SGD:
    params = net.component_parameters()
    for g, ps in params.items():
        for p in ps:
            p.requires_grad_(rates[g] > 0)
    groups = [{"params": ps, "lr": rates[g], "name": g} for g, ps in params.items() if rates[g] > 0]
    if not groups:
        # nothing to update; keep a valid optimizer so train() still runs and checkpoints
        groups = [{"params": [torch.zeros(1, requires_grad=True)], "lr": 0.0, "name": "none"}]
    opt = torch.optim.SGD(groups, lr=0.0, momentum=momentum)
    check_rates(opt, rates)
    return opt


def check_rates(opt: torch.optim.Optimizer, rates: dict) -> None:
    for group in opt.param_groups:
        name = group["name"]
        if name != "none" and group["lr"] != rates[name]:
            raise AssertionError(f"group {name}: lr {group['lr']} != expected {rates[name]}")


# ------------------------------------------------------------ episode crops

def _jitter_center(box: BoundingBox, config: TrainConfig, rng) -> tuple:
    size = math.sqrt(box.w * box.h)
    cx, cy = box.center
    dx, dy = rng.uniform(-config.center_jitter, config.center_jitter, 2) * size
    s = math.exp(rng.uniform(-config.scale_jitter, config.scale_jitter))
    return cx + dx, cy + dy, s


def crop_episode(ep: Episode, mc: ModelConfig, config: TrainConfig, rng):
    """Jittered search crops of all episode frames; returns patches and patch-pixel boxes."""
    patches, boxes = [], []
    for frame, box in ep.train.items + ep.test.items:
        cx, cy, s = _jitter_center(box, config, rng)
        ref = BoundingBox(box.x, box.y, box.w * s, box.h * s)
        p, tf = crop_search_region(rgbt_image(frame), ref, mc.search_scale, mc.out_size, (cx, cy))
        patches.append(p)
        boxes.append(tf.to_patch(box).as_array())
    return patches, np.stack(boxes)


def proposals(boxes: np.ndarray, n: int, sigma: float, rng) -> np.ndarray:
    """``K x 4`` boxes -> ``K x n x 4`` proposals with Gaussian centre and log-size jitter."""
    K = len(boxes)
    c = boxes[:, None, :2] + boxes[:, None, 2:] / 2
    size = boxes[:, None, 2:]
    c = c + rng.normal(0, sigma, (K, n, 2)) * size
    wh = size * np.exp(rng.normal(0, sigma, (K, n, 2)))
    return np.concatenate([c - wh / 2, wh], -1)


# --------------------------------------------------------------- training

def train_step(net: TrackerNet, optimizer: torch.optim.Optimizer, episodes, config: TrainConfig,
               rng: np.random.Generator) -> dict:
    """One update on a batch of episodes; returns the three losses as floats."""
    mc, n, B = net.config, config.n_frames, len(episodes)
    dtype = next(net.parameters()).dtype
    patches, boxes = [], []
    for ep in episodes:
        p, b = crop_episode(ep, mc, config, rng)
        patches += p
        boxes.append(b)
    boxes = torch.tensor(np.stack(boxes), dtype=dtype)  # B x 2n x 4 (patch pixels)
    x = patches_to_tensor(patches, dtype)
    props = proposals(boxes[:, n:].reshape(-1, 4).numpy(), config.num_proposals,
                      config.proposal_sigma, rng)
    targets = iou_array(np.repeat(boxes[:, n:].reshape(-1, 1, 4).numpy(), config.num_proposals, 1)
                        .reshape(-1, 4), props.reshape(-1, 4)).reshape(props.shape[:2])

    iou_feats, pred_feats = net.route(net.extract(x))
    fb = pixel_to_feature_boxes(boxes, net.stride4)
    centers = fb[..., :2] + fb[..., 2:] / 2
    l_cls = 0.0
    for name, block4 in pred_feats.items():
        pred = net.predictors[name]
        proj = pred.project(block4)
        proj = proj.reshape(B, 2 * n, *proj.shape[1:])
        hist = pred(proj[:, :n], fb[:, :n], centers[:, :n])
        z = pred.labels(centers[:, n:], proj.shape[-2:])
        l_cls = l_cls + classification_loss(hist, proj[:, n:], z)

    head = net.iou_head
    idx = torch.arange(B * 2 * n).reshape(B, 2 * n)
    ref = iou_feats.index(idx[:, 0])
    c = head.modulation(ref, boxes[:, 0])
    test = iou_feats.index(idx[:, n:].reshape(-1))
    pred_iou = head.predict(c.repeat_interleave(n, 0), head.test_features(test),
                            torch.tensor(props, dtype=dtype))
    l_iou = iou_regression_loss(pred_iou, torch.tensor(targets, dtype=dtype))
    l_total = l_cls + config.beta * l_iou if config.beta else l_cls

    if not torch.isfinite(l_total):
        raise FloatingPointError(
            f"non-finite loss: L_cls={float(l_cls.detach())}, L_iou={float(l_iou.detach())}, "
            f"sequences={[ep.sequence for ep in episodes]}")
    optimizer.zero_grad()
    l_total.backward()
    if config.grad_clip > 0:
        params = [p for g in optimizer.param_groups for p in g["params"]]
        torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
    optimizer.step()
    return {k: float(v.detach()) for k, v in (("L_cls", l_cls), ("L_iou", l_iou), ("L_total", l_total))}


@dataclass
class TrainResult:
    net: TrackerNet
    history: list = field(default_factory=list)
    checkpoint: Path | None = None


def _training_state(net, opt, step, rng) -> tuple[dict, dict]:
    arrays = {f"model/{k}": v for k, v in net.state_dict().items()}
    for group in opt.param_groups:
        for i, p in enumerate(group["params"]):
            buf = opt.state.get(p, {}).get("momentum_buffer")
            if buf is not None:
                arrays[f"momentum/{group['name']}/{i}"] = buf
    extra = {"step": step, "rng": rng.bit_generator.state}
    return arrays, extra


def save_training_checkpoint(path, net, opt, step, rng, fusion, train_config, pretrained=()):
    arrays, extra = _training_state(net, opt, step, rng)
    config = {"model": net.config.to_dict(), "fusion": asdict(fusion),
              "train": asdict(train_config), "pretrained": sorted(pretrained)}
    return save_checkpoint(path, arrays, config, extra)


def load_model(path, fusion: FusionConfig | None = None) -> TrackerNet:
    """Rebuild a network from a training checkpoint."""
    arrays, manifest = load_checkpoint(path)
    cfg = manifest["config"]
    fusion = fusion or FusionConfig(**cfg["fusion"])
    net = TrackerNet(fusion, ModelConfig.from_dict(cfg["model"]))
    net.load_state_dict({k[6:]: v for k, v in arrays.items() if k.startswith("model/")})
    return net


def _restore(path, net, opt, rng) -> int:
    arrays, manifest = load_checkpoint(path)
    net.load_state_dict({k[6:]: v for k, v in arrays.items() if k.startswith("model/")})
    for group in opt.param_groups:
        for i, p in enumerate(group["params"]):
            key = f"momentum/{group['name']}/{i}"
            if key in arrays:
                opt.state[p]["momentum_buffer"] = arrays[key].to(p.dtype).clone()
    rng.bit_generator.state = manifest["rng"]
    return int(manifest["step"])


def write_loss_history(path, history) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_COLUMNS)
        for row in history:
            w.writerow([row["step"]] + [repr(float(row[k])) for k in LOSS_COLUMNS[1:]])


def read_loss_history(path) -> list:
    with open(path) as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def train(dataset, config: TrainConfig, fusion: FusionConfig, model_config: ModelConfig | None = None,
          out_dir=None, net: TrackerNet | None = None, finetune: frozenset | None = None,
          pretrained=(), resume=None, log=None) -> TrainResult:
    """Run ``config.steps`` updates; writes checkpoints and ``losses.csv`` into ``out_dir``."""
    dataset = [s for s in dataset]
    if not dataset:
        raise ValueError("training needs at least one sequence")
    usable = [s for s in dataset if len(s) >= 2 * config.n_frames]
    if not usable:
        raise ValueError(f"no sequence has the {2 * config.n_frames} frames an episode needs")
    if net is None:
        net = TrackerNet(fusion, model_config or ModelConfig(seed=config.seed))
    groups = list(net.component_parameters())
    rates = effective_rates(config, fusion, groups, finetune, pretrained)
    opt = make_optimizer(net, rates, config.momentum)
    rng = np.random.default_rng(config.seed)
    out_dir = Path(out_dir) if out_dir is not None else None

    history, start = [], 0
    if resume is not None:
        start = _restore(resume, net, opt, rng)
        loss_file = Path(resume).parent / "losses.csv"
        if loss_file.is_file():
            history = [r for r in read_loss_history(loss_file) if r["step"] < start]

    def checkpoint(step):
        if out_dir is None:
            return None
        path = save_training_checkpoint(out_dir / f"ckpt_{step:06d}", net, opt, step, rng,
                                        fusion, config, pretrained)
        save_training_checkpoint(out_dir / "final", net, opt, step, rng, fusion, config, pretrained)
        write_loss_history(out_dir / "losses.csv", history)
        return path

    net.train()
    last = checkpoint(start) if start == 0 else None
    for step in range(start, config.steps):
        seqs = rng.choice(len(usable), config.batch_size)
        episodes = [sample_episode(usable[i], config.n_frames, rng, config.segment_length)
                    for i in seqs]
        losses = train_step(net, opt, episodes, config, rng)
        history.append({"step": step, **losses})
        if log is not None:
            log(step, losses)
        done = step + 1
        if done % config.checkpoint_every == 0 or done == config.steps:
            last = checkpoint(done)
    net.eval()
    for p in net.parameters():
        p.requires_grad_(True)
    if out_dir is not None and last is None:
        last = checkpoint(config.steps)
    return TrainResult(net, history, last)


# ----------------------------------------------------------- pre-training

def transfer_pretrained(net: TrackerNet, sources: dict) -> set:
    """Copy matching weights from single-modality networks.

    ``sources`` maps ``"rgb"``/``"tir"`` to trained networks. Backbones are
    copied per modality; a pixel-level backbone gets the RGB first layer
    extended to four channels. Predictor and IoU-head weights are copied when
    every shape matches. Returns the set of learning-rate groups loaded.
    """
    loaded = set()
    for m, bb in net.backbones.items():
        if m in sources and m in sources[m].backbones:
            bb.load_state_dict(sources[m].backbones[m].state_dict())
            loaded.add(f"backbone_{m}")
        elif m == "fused" and "rgb" in sources:
            bb.load_state_dict(extend_first_layer(sources["rgb"].backbones["rgb"].state_dict(), "zero"))
            loaded.add("backbone_fused")

    def try_copy(dst, src) -> bool:
        sd, dd = src.state_dict(), dst.state_dict()
        if sd.keys() != dd.keys() or any(sd[k].shape != dd[k].shape for k in sd):
            return False
        dst.load_state_dict(sd)
        return True

    f = net.fusion
    if f.level == "response":
        ok = [try_copy(net.predictors[m], sources[m].predictors["main"])
              for m in ("rgb", "tir") if m in sources]
        if ok and all(ok):
            loaded.add("predictor")
    elif f.predictor_input in sources:
        if try_copy(net.predictors["main"], sources[f.predictor_input].predictors["main"]):
            loaded.add("predictor")
    if f.iou_input in sources and try_copy(net.iou_head, sources[f.iou_input].iou_head):
        loaded.add("iou_head")
    return loaded


def load_json(path) -> dict:
    return json.loads(Path(path).read_text())
