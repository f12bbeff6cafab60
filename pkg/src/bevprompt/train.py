# coding: utf-8
"""
Toy training of the prompted model on synthetic scenes.

Every prompt of a frame is fused together with the frame's toy image
features; prompts matched to a ground-truth object are supervised with
(depth, yaw residual, log size ratios). A prompt-free baseline with the same
decode heads is trained under the identical budget.
"""

import logging
import math
import os

import numpy as np
import torch
import torch.nn.functional as nnf
from scipy.stats import spearmanr
from torch.optim.lr_scheduler import CosineAnnealingLR
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

from bevprompt import BEVPromptProperties
from bevprompt.errors import ConfigurationException, TrainingAbortedException
from bevprompt.geometry import camera_depth, iou_aabb
from bevprompt.matching import TP, match_greedy
from bevprompt.metrics import EvalConfig, map_coco_2d
from bevprompt.model import BASELINE, PROMPTED, ModelConfig, build_model, save_checkpoint
from bevprompt.numerics import DTYPE
from bevprompt.rotations import normalize_angle
from bevprompt.synth import (CLASS_SIZES, DetectorNoise, SceneConfig, derive_2d, gen_scenes,
                             render_toy_features, simulate_2d_detector)
from bevprompt.utils import Config, check_finite, tensor_meta_data
from bevprompt.yawtune import yaw_error

PREDICTED = 'predicted'
GROUND_TRUTH = 'ground-truth'

DEPTH_SCALE = 40.0


class TrainConfig(Config):
    defaults = {
        'lr': 8e-4,
        'weight_decay': 0.01,
        'betas': [0.9, 0.999],
        'eps': 1e-8,
        'epochs': 50,
        'batch_size': 4,
        'seed': 0,
        'prompt_source': PREDICTED,
        'cosine': False,
        'val_fraction': 0.25,
        'match_iou': 0.5,
        # 2D detections below this score never become prompts
        'prompt_score_threshold': 0.3,
        'grid': [8, 16],
        'baseline': True,
        'model': {},
        'scene': {'frames': 48, 'objects_min': 4, 'objects_max': 10},
        # simulated 2D detector for predicted prompts, train and validation
        'noise': {'center_sigma': 3.0, 'size_sigma': 3.0, 'fn_rate': 0.05,
                  'fp_rate': 0.05, 'confusion_rate': 0.02},
    }

    def validate(self):
        if not self.lr > 0:
            raise ConfigurationException('lr must be positive')
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationException('epochs and batch_size must be >= 1')
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1) or self.eps <= 0 or self.weight_decay < 0:
            raise ConfigurationException('need betas in [0, 1), eps > 0, weight_decay >= 0')
        if self.prompt_source not in (PREDICTED, GROUND_TRUTH):
            raise ConfigurationException('unknown prompt_source {!r}'.format(self.prompt_source))
        if not 0 < self.val_fraction < 1:
            raise ConfigurationException('val_fraction must lie in (0, 1)')
        self.model_config()
        self.scene_config()
        self.detector_noise()

    def model_config(self):
        return ModelConfig.from_dict(self.model)

    def scene_config(self):
        return SceneConfig.from_dict(self.scene)

    def detector_noise(self):
        return DetectorNoise.from_dict(self.noise)


def _check_gradient(index, grad):
    if not check_finite(grad):
        raise TrainingAbortedException(
            'non-finite gradient for parameter {:d} ({:s}): {:d} NaN, {:d} Inf'.format(
                index, tensor_meta_data(grad), int(torch.isnan(grad).sum()),
                int(torch.isinf(grad).sum())))


def _adamw_update(p, g, m, v, step, lr, beta1, beta2, eps, weight_decay):
    """In-place decoupled-weight-decay Adam update of `p`, `m` and `v`."""
    m.mul_(beta1).add_(g, alpha=1 - beta1)
    v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
    m_hat = m / (1 - beta1 ** step)
    v_hat = v / (1 - beta2 ** step)
    p.sub_(lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * p))


def adamw_step(params, grads, state, cfg):
    """
    Functional AdamW step.

    Args:
        params (list(torch.Tensor)): current parameters.
        grads (list(torch.Tensor)): their gradients.
        state (dict): {'step', 'm', 'v'} from the previous call, or None.
        cfg (TrainConfig): lr, betas, eps and weight_decay.

    Returns:
        tuple: updated parameters and state; the inputs are left untouched.

    Raises:
        TrainingAbortedException: a gradient holds NaN or Inf.
    """
    if len(params) != len(grads):
        raise ConfigurationException('{:d} parameters but {:d} gradients'.format(
            len(params), len(grads)))
    if state is None:
        state = {'step': 0, 'm': [torch.zeros_like(p) for p in params],
                 'v': [torch.zeros_like(p) for p in params]}
    beta1, beta2 = cfg.betas
    step = state['step'] + 1
    new_params, new_m, new_v = [], [], []
    for i, (p, g, m, v) in enumerate(zip(params, grads, state['m'], state['v'])):
        if p.shape != g.shape or p.shape != m.shape:
            raise ConfigurationException('parameter {:d}: shape mismatch {!r} vs {!r}'.format(
                i, tuple(p.shape), tuple(g.shape)))
        _check_gradient(i, g)
        p, m, v = p.detach().clone(), m.clone(), v.clone()
        _adamw_update(p, g, m, v, step, cfg.lr, beta1, beta2, cfg.eps, cfg.weight_decay)
        new_params.append(p)
        new_m.append(m)
        new_v.append(v)
    return new_params, {'step': step, 'm': new_m, 'v': new_v}


class AdamW(torch.optim.Optimizer):
    """
    AdamW with decoupled weight decay,
    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta).
    """

    def __init__(self, params, lr=8e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        defaults = dict(lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay)
        super(AdamW, self).__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        index = 0
        for group in self.param_groups:
            beta1, beta2 = group['betas']
            for p in group['params']:
                index += 1
                if p.grad is None:
                    continue
                _check_gradient(index - 1, p.grad)
                state = self.state[p]
                if len(state) == 0:
                    state['step'] = 0
                    state['exp_avg'] = torch.zeros_like(p)
                    state['exp_avg_sq'] = torch.zeros_like(p)
                state['step'] += 1
                _adamw_update(p, p.grad, state['exp_avg'], state['exp_avg_sq'], state['step'],
                              group['lr'], beta1, beta2, group['eps'], group['weight_decay'])
        return loss


def fold_half_pi(theta):
    """Angle modulo pi, in (-pi/2, pi/2]."""
    return normalize_angle(2.0 * np.asarray(theta)) / 2.0


def viewing_azimuth(calib, c):
    cam = calib.camera_center
    return math.atan2(c.y - cam[1], c.x - cam[0])


def regression_targets(calib, c):
    """(depth / 40 m, yaw residual to the viewing ray mod pi, log w/h/l ratios to the class mean)."""
    mean = CLASS_SIZES[c.label]
    return [camera_depth(calib, c.center) / DEPTH_SCALE,
            float(fold_half_pi(c.yaw - viewing_azimuth(calib, c))),
            math.log(c.w / mean[0]), math.log(c.h / mean[1]), math.log(c.l / mean[2])]


class FrameSample:
    """Toy features, prompts (descending score) and the targets of the matched prompts of a frame."""

    def __init__(self, frame, calib, image, prompts, targets, mask, matched):
        self.frame = frame
        self.calib = calib
        self.image = image
        self.prompts = prompts
        self.targets = targets
        self.mask = mask
        self.matched = matched

    @property
    def n_supervised(self):
        return int(self.mask.sum())


def build_sample(scene, prompts, channels, grid, match_iou=0.5, score_threshold=0.0):
    prompts = [p for p in prompts if p.score >= score_threshold]
    prompts = sorted(prompts, key=lambda p: -p.score)
    flags, det_to_gt, _ = match_greedy(prompts, derive_2d(scene), iou_aabb, match_iou)
    targets = torch.zeros(len(prompts), len(BEVPromptProperties.target_names), dtype=DTYPE)
    matched = []
    for i, j in enumerate(det_to_gt):
        if flags[i] == TP:
            c = scene.cuboids[j]
            targets[i] = torch.as_tensor(regression_targets(scene.calib, c), dtype=DTYPE)
            matched.append(c)
        else:
            matched.append(None)
    mask = torch.as_tensor(flags == TP)
    image = render_toy_features(scene, grid=tuple(grid), channels=channels)
    return FrameSample(scene.frame, scene.calib, image, prompts, targets, mask, matched)


class PromptDataset(Dataset):

    def __init__(self, samples):
        self.samples = list(samples)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, idx):
        return self.samples[idx]


def collate_frames(batch):
    return list(batch)


def split_frames(scenes, val_fraction):
    """Train/validation split by frame index: the last `val_fraction` of the frames validate."""
    scenes = sorted(scenes, key=lambda s: s.frame)
    n_val = max(1, int(round(len(scenes) * val_fraction)))
    if n_val >= len(scenes):
        raise ConfigurationException('need at least 2 frames to split into train and validation')
    return scenes[:-n_val], scenes[-n_val:]


class ToyData:
    """Training and validation samples plus the 2D detections and boxes behind them."""

    def __init__(self, train, val, val_dets2d, val_gts2d):
        self.train = train
        self.val = val
        self.val_dets2d = val_dets2d
        self.val_gts2d = val_gts2d


def prepare_data(cfg, scenes=None, dets2d=None):
    """
    Args:
        cfg (TrainConfig): training configuration.
        scenes (list(Scene)): scenes to use; generated from `cfg.scene` if None.
        dets2d (dict): 2D detections by frame; simulated with `cfg.noise` if None.
    """
    if scenes is None:
        scenes = gen_scenes(cfg.scene_config())
    noise = cfg.detector_noise()
    if dets2d is None:
        dets2d = {s.frame: simulate_2d_detector(s, noise, cfg.seed) for s in scenes}
    channels = cfg.model_config().c_in
    train_scenes, val_scenes = split_frames(scenes, cfg.val_fraction)

    def prompts_for(scene, source):
        if source == GROUND_TRUTH:
            return derive_2d(scene)
        return dets2d.get(scene.frame, [])

    train = [build_sample(s, prompts_for(s, cfg.prompt_source), channels, cfg.grid,
                          cfg.match_iou, cfg.prompt_score_threshold) for s in train_scenes]
    val = [build_sample(s, prompts_for(s, PREDICTED), channels, cfg.grid,
                        cfg.match_iou, cfg.prompt_score_threshold) for s in val_scenes]
    val_dets2d = [d for s in val_scenes for d in dets2d.get(s.frame, [])]
    val_gts2d = [b for s in val_scenes for b in derive_2d(s)]
    logging.info('prepared %d training and %d validation frames (%s prompts)',
                 len(train), len(val), cfg.prompt_source)
    return ToyData(train, val, val_dets2d, val_gts2d)


def batch_loss(model, batch):
    """Smooth-L1 loss, equal target weights, averaged over the supervised prompts of a batch."""
    total, count = None, 0
    for sample in batch:
        if sample.n_supervised == 0:
            continue
        W, H = sample.calib.image_width, sample.calib.image_height
        pred = model(sample.image, sample.prompts, W, H)
        loss = nnf.smooth_l1_loss(pred[sample.mask], sample.targets[sample.mask], reduction='sum')
        total = loss if total is None else total + loss
        count += sample.n_supervised
    if total is None:
        return None
    return total / (count * len(BEVPromptProperties.target_names))


def validate_model(model, samples):
    """
    Returns:
        dict: depth MAE (m), yaw MAE (rad, modulo pi) and size MAE (m) over
            the supervised validation prompts; None entries without any.
    """
    depth, yaw, size = [], [], []
    with torch.no_grad():
        for sample in samples:
            if sample.n_supervised == 0:
                continue
            W, H = sample.calib.image_width, sample.calib.image_height
            pred = model(sample.image, sample.prompts, W, H).numpy()
            for i, c in enumerate(sample.matched):
                if c is None:
                    continue
                target = sample.targets[i].numpy()
                depth.append(abs(pred[i, 0] - target[0]) * DEPTH_SCALE)
                yaw.append(yaw_error(pred[i, 1], target[1]))
                mean = np.array(CLASS_SIZES[c.label])
                size.append(np.abs(mean * np.exp(pred[i, 2:]) - [c.w, c.h, c.l]).mean())

    def mae(values):
        return float(np.mean(values)) if values else None

    return {'depth_mae': mae(depth), 'yaw_mae': mae(yaw), 'size_mae': mae(size)}


def fit(model, data, cfg, progress=False):
    """Train `model` in place; returns (per-epoch history, per-batch losses)."""
    optimizer = AdamW(model.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps,
                      weight_decay=cfg.weight_decay)
    scheduler = CosineAnnealingLR(optimizer, T_max=cfg.epochs) if cfg.cosine else None
    loader = DataLoader(PromptDataset(data.train), batch_size=cfg.batch_size, shuffle=True,
                        collate_fn=collate_frames,
                        generator=torch.Generator().manual_seed(cfg.seed))
    history, batch_losses = [], []
    for epoch in tqdm(range(1, cfg.epochs + 1), ncols=100, disable=not progress):
        losses = []
        for batch in loader:
            optimizer.zero_grad()
            loss = batch_loss(model, batch)
            if loss is None:
                continue
            if not check_finite(loss):
                raise TrainingAbortedException('non-finite loss at epoch {:d}'.format(epoch))
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        if scheduler is not None:
            scheduler.step()
        batch_losses.extend(losses)
        record = {'epoch': epoch, 'train_loss': float(np.mean(losses)) if losses else None}
        record.update(validate_model(model, data.val))
        history.append(record)
        logging.info('epoch %d: loss %s, depth MAE %s m, yaw MAE %s rad', epoch,
                     record['train_loss'], record['depth_mae'], record['yaw_mae'])
    return history, batch_losses


class TrainReport:
    """
    Training history of the prompted model (and, if trained, the baseline).

    Each history entry holds epoch, train_loss, depth_mae, yaw_mae and size_mae.
    """

    def __init__(self, config, history, batch_losses, baseline=None, checkpoint=None):
        self.config = config
        self.history = history
        self.batch_losses = batch_losses
        self.baseline = baseline
        self.checkpoint = checkpoint

    @property
    def final(self):
        return self.history[-1]

    @property
    def baseline_final(self):
        return self.baseline[-1] if self.baseline else None

    def to_dict(self):
        return {'config': self.config, 'history': self.history,
                'batch_losses': self.batch_losses, 'baseline': self.baseline,
                'checkpoint': self.checkpoint}


def train_toy(cfg=None, data=None, out=None, progress=False):
    """
    Train the prompted model (and the pooled baseline if `cfg.baseline`).

    Args:
        cfg (TrainConfig): configuration.
        data (ToyData): prepared samples; built from `cfg` if None.
        out (str): directory for the checkpoints, none written if None.

    Returns:
        TrainReport
    """
    cfg = cfg if cfg is not None else TrainConfig()
    data = data if data is not None else prepare_data(cfg)
    model_cfg = cfg.model_config()

    torch.manual_seed(cfg.seed)
    model = build_model(model_cfg, PROMPTED)
    history, batch_losses = fit(model, data, cfg, progress)

    baseline = None
    if cfg.baseline:
        torch.manual_seed(cfg.seed)
        baseline_model = build_model(model_cfg, BASELINE)
        baseline, _ = fit(baseline_model, data, cfg, progress)

    checkpoint = None
    if out is not None:
        checkpoint = os.path.join(out, 'checkpoint')
        save_checkpoint(model, checkpoint)
        if cfg.baseline:
            save_checkpoint(baseline_model, os.path.join(out, 'baseline'))
    return TrainReport(cfg.to_dict(), history, batch_losses, baseline, checkpoint)


def prompt_quality_correlation(maps, errors):
    """Spearman correlation of 2D mAP with negative 3D error; None when degenerate."""
    if len(maps) < 2:
        return None
    if len(maps) < 3:
        logging.warning('prompt-quality sweep with %d levels is not meaningful', len(maps))
    rho, _ = spearmanr(maps, [-e for e in errors])
    rho = float(rho)
    return None if math.isnan(rho) else rho


def sweep_prompt_quality(noise_levels, cfg=None, progress=False):
    """
    Train with simulated 2D detectors of increasing center/size jitter.

    Returns:
        dict: 'levels' (noise, map_2d, depth_mae, yaw_mae, size_mae per level)
            and 'spearman' (2D mAP vs negative depth MAE, None if degenerate).
    """
    cfg = cfg if cfg is not None else TrainConfig()
    cfg = cfg.replace(baseline=False, prompt_source=PREDICTED)
    scenes = gen_scenes(cfg.scene_config())
    rows = []
    for level in tqdm(noise_levels, ncols=100, disable=not progress):
        noise = dict(cfg.noise, center_sigma=float(level), size_sigma=float(level))
        level_cfg = cfg.replace(noise=noise)
        data = prepare_data(level_cfg, scenes)
        map_2d = map_coco_2d(data.val_dets2d, data.val_gts2d, EvalConfig())
        final = train_toy(level_cfg, data).final
        rows.append({'noise': float(level), 'map_2d': map_2d, 'depth_mae': final['depth_mae'],
                     'yaw_mae': final['yaw_mae'], 'size_mae': final['size_mae']})
        logging.info('noise %.2f px: 2D mAP %s, depth MAE %s m', level, map_2d,
                     final['depth_mae'])
    valid = [r for r in rows if r['map_2d'] is not None and r['depth_mae'] is not None]
    rho = prompt_quality_correlation([r['map_2d'] for r in valid],
                                     [r['depth_mae'] for r in valid])
    return {'levels': rows, 'spearman': rho}


# fixed synthetic benchmark for the prompted-vs-baseline comparison
STANDARD_BENCHMARK = {
    'epochs': 30,
    'batch_size': 4,
    'scene': {'frames': 48, 'objects_min': 4, 'objects_max': 10, 'seed': 7},
    'noise': {'center_sigma': 3.0, 'size_sigma': 3.0, 'fn_rate': 0.05,
              'fp_rate': 0.05, 'confusion_rate': 0.02},
}


def run_benchmark(cfg=None, seeds=(0, 1, 2), ablation=True, progress=False):
    """
    Prompted model vs pooled baseline (and ground-truth-prompt training) per seed.

    Returns:
        list(dict): seed, prompted, baseline, improvement (relative depth MAE
            reduction) and, with `ablation`, ground_truth_prompts.
    """
    cfg = cfg if cfg is not None else TrainConfig(**STANDARD_BENCHMARK)
    scenes = gen_scenes(cfg.scene_config())
    rows = []
    for seed in seeds:
        seed_cfg = cfg.replace(seed=int(seed), baseline=True, prompt_source=PREDICTED)
        report = train_toy(seed_cfg, prepare_data(seed_cfg, scenes), progress=progress)
        prompted = report.final['depth_mae']
        baseline = report.baseline_final['depth_mae']
        row = {'seed': int(seed), 'prompted': prompted, 'baseline': baseline,
               'improvement': None if not baseline else 1.0 - prompted / baseline}
        if ablation:
            gt_cfg = seed_cfg.replace(baseline=False, prompt_source=GROUND_TRUTH)
            row['ground_truth_prompts'] = train_toy(
                gt_cfg, prepare_data(gt_cfg, scenes), progress=progress).final['depth_mae']
        rows.append(row)
    return rows


BENCHMARK_COLUMNS = [('seed', 'seed'), ('prompted', 'prompted depth MAE (m)'),
                     ('baseline', 'baseline depth MAE (m)'), ('improvement', 'relative gain'),
                     ('ground_truth_prompts', 'GT-prompt depth MAE (m)')]


def markdown_table(rows, columns=None):
    columns = columns if columns is not None else BENCHMARK_COLUMNS
    columns = [(k, title) for k, title in columns if any(k in r for r in rows)]

    def cell(value):
        if value is None:
            return '-'
        if isinstance(value, float):
            return '{:.4f}'.format(value)
        return str(value)

    lines = ['| ' + ' | '.join(t for _, t in columns) + ' |',
             '|' + '|'.join('---' for _ in columns) + '|']
    for r in rows:
        lines.append('| ' + ' | '.join(cell(r.get(k)) for k, _ in columns) + ' |')
    return '\n'.join(lines)
