"""Two-stage orchestration: synthesis, medium images, prompt learning,
restorer training with the quality-aware losses, evaluation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .checkpoint import config_hash, load_archive, load_state, save_archive, save_state
from .config import RunConfig
from .degrade import DatasetConfig, make_dataset, save_png, write_dataset
from .encoders import load_backend, to_hwc, to_nchw
from .errors import ContractError, PipelineOrderError, TrainingError
from .guidance import GuidedRestorer, extract_semantic
from .metrics import psnr, psnr_batch, ssim
from .perceiver import QualityPromptSet, TripletSet, gen_medium_images, train_prompts
from .restorer import RestorerConfig

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "L_rec", "L_cl", "L_clip", "L_dpl", "L_total")


def derived_rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng([int(k) & 0xFFFFFFFF for k in keys])


# fields that may change between a run and its resumption
_VOLATILE = {"paths": None, "stage2": ("iters", "checkpoint_every", "log_every")}


def run_hash(cfg: RunConfig) -> str:
    """Config hash ignoring output paths and schedule length."""
    d = cfg.to_dict()
    for section, keys in _VOLATILE.items():
        if keys is None:
            d.pop(section)
        else:
            for k in keys:
                d[section].pop(k)
    return config_hash(d)


def load_backends(cfg: RunConfig) -> dict:
    out = {}
    for role in ("vision_language", "semantic", "perceptual"):
        b = getattr(cfg.backends, role)
        out[role] = load_backend(role, b.mode, b.seed, b.weights)
    return out


def dataset_arrays(ds) -> tuple[np.ndarray, np.ndarray, list[str]]:
    clean, degraded, kinds = [], [], []
    for s in ds:
        clean.append(s.clean)
        degraded.append(s.degraded)
        kinds.append(s.spec.kind)
    return np.stack(clean), np.stack(degraded), kinds


def _check_finite(loss: torch.Tensor, step: int, what: str):
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite {what} at step {step}")


# ---------------------------------------------------------------------------
# Stage 1


def synth(cfg: RunConfig) -> list[dict]:
    rows = write_dataset(make_dataset(cfg.dataset), cfg.paths.data)
    index = cfg.paths.data / "index.csv"
    with index.open("w", newline="") as fh:
        keys = sorted({k for r in rows for k in r}, key=lambda k: (k not in ("index", "file", "kind", "seed"), k))
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)
    return rows


def train_proxy(degraded: np.ndarray, clean: np.ndarray, rcfg: RestorerConfig, iters: int, lr: float, batch: int, seed: int):
    """Fit an unguided restorer on ``(degraded, clean)`` pairs and return a restore function."""
    torch.manual_seed(seed)
    model = GuidedRestorer(rcfg, guided=False)
    opt = torch.optim.AdamW(model.parameters(), lr=lr, betas=(0.9, 0.999))
    rng = derived_rng(seed, 17)
    d_all, c_all = to_nchw(degraded), to_nchw(clean)
    bs = min(batch, len(degraded))
    for step in range(iters):
        idx = rng.choice(len(degraded), size=bs, replace=False)
        loss = L.rec_loss(model(d_all[idx]), c_all[idx])
        _check_finite(loss, step, "proxy loss")
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.eval()

    def restore(images: np.ndarray) -> list[np.ndarray]:
        with torch.no_grad():
            out = model(to_nchw(np.asarray(images)))
        return [to_hwc(o) for o in out.clamp(0, 1)]

    return restore


def gen_medium(cfg: RunConfig) -> dict:
    clean, degraded, kinds = dataset_arrays(make_dataset(cfg.dataset))
    m = cfg.medium

    def trainer(d, c):
        return train_proxy(d, c, m.restorer, m.iters, m.lr, m.batch, cfg.seed)

    medium, folds = gen_medium_images(degraded, clean, trainer, seed=cfg.seed)
    medium = np.stack(medium)
    save_archive(cfg.paths.medium, {"medium": medium, "folds": folds}, {"config_hash": config_hash(cfg.to_dict()["dataset"])})
    for i, img in enumerate(medium):
        save_png(img, cfg.paths.root / "medium" / f"{i:05d}_{kinds[i]}.png")
    stats = {
        "psnr_degraded": float(np.mean([psnr(d, c) for d, c in zip(degraded, clean)])),
        "psnr_medium": float(np.mean([psnr(mm, c) for mm, c in zip(medium, clean)])),
    }
    log.info("medium images: mean PSNR %.2f dB (degraded %.2f dB)", stats["psnr_medium"], stats["psnr_degraded"])
    return stats


def load_triplets(cfg: RunConfig) -> TripletSet:
    if not cfg.paths.medium.exists():
        raise PipelineOrderError(f"medium images not found at {cfg.paths.medium}; run gen-medium first")
    clean, degraded, _ = dataset_arrays(make_dataset(cfg.dataset))
    arrays, _ = load_archive(cfg.paths.medium)
    medium = arrays["medium"]
    if medium.shape != degraded.shape:
        raise PipelineOrderError("medium images do not match the current dataset config; rerun gen-medium")
    return TripletSet(degraded, medium, clean)


def train_prompt_stage(cfg: RunConfig, triplets: TripletSet | None = None, vl_backend=None) -> QualityPromptSet:
    triplets = triplets if triplets is not None else load_triplets(cfg)
    vl = vl_backend or load_backends(cfg)["vision_language"]
    s1 = cfg.stage1
    log_path = cfg.paths.logs / "prompts.csv"
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with log_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "L_ce"])

        def on_step(step, loss, _):
            if s1.log_every and step % s1.log_every == 0:
                writer.writerow([step, repr(loss)])

        try:
            prompts = train_prompts(
                triplets, vl, init_mode=s1.init_mode, iters=s1.iters, lr=s1.lr, batch_size=s1.batch,
                seed=cfg.seed, n_tokens=s1.n_tokens, weight_decay=s1.weight_decay, on_step=on_step,
            )
        except TrainingError as err:
            err.prompts.save(cfg.paths.prompts.with_suffix(".last_good.npz"))
            raise
    prompts.save(cfg.paths.prompts)
    return prompts


# ---------------------------------------------------------------------------
# Stage 2


def dial_negatives(clean: np.ndarray, degraded: np.ndarray, ratios) -> np.ndarray:
    """Stand-in proxy restorations ``r * clean + (1 - r) * degraded`` -> ``[N, z, H, W, 3]``."""
    return np.stack([r * clean + (1.0 - r) * degraded for r in ratios], axis=1).astype(np.float32)


@dataclass
class Batch:
    clean: torch.Tensor
    degraded: torch.Tensor
    negatives: torch.Tensor
    neg_psnr: torch.Tensor
    kinds: list
    crops_a: torch.Tensor
    crops_b: torch.Tensor


class RestorerTrainer:
    """Stage-2 loop with derived per-step randomness so runs resume bit-exactly.

    Epoch ``k`` visits a permutation of the dataset seeded by ``(seed, k)``;
    step ``s`` crops/flips with an RNG seeded by ``(seed, s)``. At every
    epoch start the average PSNR of the current model on a fixed monitor
    subset refreshes the difficulty state.
    """

    def __init__(self, cfg: RunConfig, prompts: QualityPromptSet | None = None, backends: dict | None = None,
                 dataset=None):
        self.cfg = cfg
        s2 = cfg.stage2
        if prompts is None:
            if not cfg.paths.prompts.exists():
                raise PipelineOrderError(f"prompt checkpoint {cfg.paths.prompts} missing; run train-prompts first")
            prompts = QualityPromptSet.load(cfg.paths.prompts)
        if not prompts.frozen:
            raise PipelineOrderError("restorer training requires frozen prompts from the prompt-learning stage")
        self.prompts = prompts
        self.backends = backends or load_backends(cfg)
        ds = dataset if dataset is not None else make_dataset(cfg.dataset)
        self.clean, self.degraded, self.kinds = dataset_arrays(ds)
        n, h, w, _ = self.clean.shape
        self.patch = min(s2.patch, h, w)
        if self.patch % 8:
            raise ContractError(f"training patch {self.patch} must be divisible by 8")
        self.negatives = dial_negatives(self.clean, self.degraded, s2.dial_ratios)
        self.neg_psnr = np.array(
            [[psnr(q, c) for q in qs] for qs, c in zip(self.negatives, self.clean)], dtype=np.float64
        ).reshape(n, len(s2.dial_ratios))
        self.monitor = np.arange(min(s2.monitor_size, n))
        self._monitor_semantic = None
        self.batch_size = min(s2.batch, n)
        self.steps_per_epoch = math.ceil(n / self.batch_size)
        self.weights = L.LossWeights(s2.lambda_cl if s2.use_cl else 0.0,
                                     s2.lambda_clip if s2.use_clip else 0.0,
                                     s2.lambda_dpl if s2.use_dpl else 0.0)
        torch.manual_seed(cfg.seed)
        self.model = GuidedRestorer(s2.restorer)
        self.opt = torch.optim.AdamW(self.model.parameters(), lr=s2.lr, betas=tuple(s2.betas), weight_decay=s2.weight_decay)
        self.step = 0
        self.difficulty = L.DifficultyState(epoch=-1, gamma=s2.gamma, lambda_easy=s2.lambda_easy)
        self.cfg_hash = run_hash(cfg)
        self.history: list[dict] = []

    # -- data -------------------------------------------------------------

    def batch_indices(self, step: int) -> np.ndarray:
        epoch, pos = divmod(step, self.steps_per_epoch)
        perm = derived_rng(self.cfg.seed, 101, epoch).permutation(len(self.clean))
        start = pos * self.batch_size
        idx = perm[start : start + self.batch_size]
        if len(idx) < self.batch_size:
            idx = np.concatenate([idx, perm[: self.batch_size - len(idx)]])
        return idx

    def make_batch(self, step: int) -> Batch:
        idx = self.batch_indices(step)
        rng = derived_rng(self.cfg.seed, 202, step)
        h, w = self.clean.shape[1:3]
        p = self.patch
        cl = self.cfg.stage2.cl_crop
        cs, ds, ns, ca, cb = [], [], [], [], []
        for i in idx:
            top = int(rng.integers(0, h - p + 1))
            left = int(rng.integers(0, w - p + 1))
            sl = (slice(top, top + p), slice(left, left + p))
            c, d, q = self.clean[i][sl], self.degraded[i][sl], self.negatives[i][:, sl[0], sl[1]]
            if self.cfg.stage2.flips:
                if rng.random() < 0.5:
                    c, d, q = c[:, ::-1], d[:, ::-1], q[:, :, ::-1]
                if rng.random() < 0.5:
                    c, d, q = c[::-1], d[::-1], q[:, ::-1]
            cs.append(c)
            ds.append(d)
            ns.append(q)
            crops = []
            for _ in range(2):
                t0 = int(rng.integers(0, h - cl + 1))
                l0 = int(rng.integers(0, w - cl + 1))
                crops.append(self.degraded[i][t0 : t0 + cl, l0 : l0 + cl])
            ca.append(crops[0])
            cb.append(crops[1])
        neg = torch.from_numpy(np.ascontiguousarray(np.stack(ns))).permute(0, 1, 4, 2, 3).contiguous()
        return Batch(
            clean=to_nchw(np.stack(cs)),
            degraded=to_nchw(np.stack(ds)),
            negatives=neg,
            neg_psnr=torch.from_numpy(self.neg_psnr[idx]),
            kinds=[self.kinds[i] for i in idx],
            crops_a=to_nchw(np.stack(ca)),
            crops_b=to_nchw(np.stack(cb)),
        )

    # -- evaluation -------------------------------------------------------

    def restore_arrays(self, degraded: np.ndarray, chunk: int = 8, semantic=None) -> np.ndarray:
        self.model.eval()
        outs = []
        with torch.no_grad():
            for s in range(0, len(degraded), chunk):
                x = to_nchw(degraded[s : s + chunk])
                sem = (extract_semantic(x, self.backends["semantic"]) if semantic is None
                       else [f[s : s + chunk] for f in semantic])
                outs.append(self.model(x, sem).clamp(0, 1))
        self.model.train()
        return torch.cat(outs).permute(0, 2, 3, 1).numpy()

    def average_psnr(self, indices=None) -> float:
        if indices is None:
            # monitor inputs never change and the semantic backend is frozen
            if self._monitor_semantic is None:
                self._monitor_semantic = extract_semantic(to_nchw(self.degraded[self.monitor]), self.backends["semantic"])
            idx, sem = self.monitor, self._monitor_semantic
        else:
            idx, sem = np.asarray(indices), None
        restored = self.restore_arrays(self.degraded[idx], semantic=sem)
        return float(psnr_batch(to_nchw(restored), to_nchw(self.clean[idx])).mean())

    def refresh_difficulty(self, epoch: int):
        self.difficulty = L.DifficultyState(epoch=epoch, avg_psnr=self.average_psnr(),
                                            gamma=self.cfg.stage2.gamma, lambda_easy=self.cfg.stage2.lambda_easy)
        log.info("epoch %d: monitor avg PSNR %.3f dB", epoch, self.difficulty.avg_psnr)

    # -- optimisation -----------------------------------------------------

    def compute_losses(self, batch: Batch) -> dict:
        s2 = self.cfg.stage2
        sem = extract_semantic(batch.degraded, self.backends["semantic"])
        code = self.model.cfe(batch.degraded)
        i_r = self.model(batch.degraded, sem, code)
        comps = {"L_rec": L.rec_loss(i_r, batch.clean)}
        zero = i_r.new_zeros(())
        if s2.use_cl:
            z_a, z_b = self.model.cfe(torch.cat([batch.crops_a, batch.crops_b])).chunk(2)
            comps["L_cl"] = L.batch_contrastive_loss(z_a, z_b, batch.kinds, s2.tau)
        else:
            comps["L_cl"] = zero
        comps["L_clip"] = L.clip_aware_loss(i_r, self.prompts, self.backends["vision_language"]) if s2.use_clip else zero
        if s2.use_dpl:
            bank = L.NegativeBank(batch.degraded, batch.negatives, batch.neg_psnr, tuple(f"dial{r}" for r in s2.dial_ratios))
            comps["L_dpl"] = L.dpl_loss(i_r, batch.clean, bank, self.difficulty, self.backends["perceptual"])
        else:
            comps["L_dpl"] = zero
        comps["L_total"] = L.total_loss(comps, self.weights)
        return comps

    def train_step(self) -> dict:
        epoch = self.step // self.steps_per_epoch
        if epoch != self.difficulty.epoch:
            self.refresh_difficulty(epoch)
        comps = self.compute_losses(self.make_batch(self.step))
        _check_finite(comps["L_total"], self.step, "restorer loss")
        self.opt.zero_grad()
        comps["L_total"].backward()
        self.opt.step()
        row = {"step": self.step, **{k: float(v.detach()) for k, v in comps.items()}}
        self.step += 1
        return row

    def train(self, iters: int | None = None, log_path: Path | None = None, checkpoint_path: Path | None = None,
              checkpoint_every: int | None = None) -> list[dict]:
        s2 = self.cfg.stage2
        end = iters if iters is not None else s2.iters
        every = s2.checkpoint_every if checkpoint_every is None else checkpoint_every
        fh = writer = None
        if log_path is not None:
            log_path = Path(log_path)
            log_path.parent.mkdir(parents=True, exist_ok=True)
            fresh = self.step == 0 or not log_path.exists()
            fh = log_path.open("w" if fresh else "a", newline="")
            writer = csv.writer(fh)
            if fresh:
                writer.writerow(LOG_COLUMNS)
        rows = []
        try:
            while self.step < end:
                row = self.train_step()
                rows.append(row)
                if writer is not None:
                    writer.writerow([row["step"]] + [repr(row[c]) for c in LOG_COLUMNS[1:]])
                if s2.log_every and row["step"] % s2.log_every == 0:
                    log.info("step %d  " + "  ".join(f"{c}=%.5f" for c in LOG_COLUMNS[1:]), row["step"],
                             *[row[c] for c in LOG_COLUMNS[1:]])
                if checkpoint_path is not None and every and self.step % every == 0:
                    self.save(checkpoint_path)
        except TrainingError:
            # the failing step never reached the optimizer, so the current weights are the last finite ones
            if checkpoint_path is not None:
                self.save(checkpoint_path)
                log.error("non-finite loss at step %d; saved last finite state to %s", self.step, checkpoint_path)
            raise
        finally:
            if fh is not None:
                fh.close()
        if checkpoint_path is not None:
            self.save(checkpoint_path)
        self.history.extend(rows)
        return rows

    # -- checkpointing ----------------------------------------------------

    def state(self) -> dict:
        return {
            "model": self.model.state_dict(),
            "optimizer": self.opt.state_dict(),
            "step": self.step,
            "difficulty": {"epoch": self.difficulty.epoch, "avg_psnr": self.difficulty.avg_psnr},
        }

    def save(self, path) -> None:
        meta = {"config_hash": self.cfg_hash, "stage": 2, "step": self.step,
                "epoch_avg_psnr": self.difficulty.avg_psnr, "restorer": self.cfg.to_dict()["stage2"]["restorer"]}
        save_state(path, self.state(), meta)

    def load(self, path) -> dict:
        state, meta = load_state(path)
        if meta.get("config_hash") != self.cfg_hash:
            log.warning("checkpoint %s was written with a different config (hash %s, current %s)",
                        path, meta.get("config_hash"), self.cfg_hash)
        self.model.load_state_dict(state["model"])
        self.opt.load_state_dict(state["optimizer"])
        self.step = int(state["step"])
        d = state["difficulty"]
        self.difficulty = L.DifficultyState(epoch=int(d["epoch"]), avg_psnr=float(d["avg_psnr"]),
                                            gamma=self.cfg.stage2.gamma, lambda_easy=self.cfg.stage2.lambda_easy)
        return meta


def load_restorer(path, cfg: RunConfig | None = None) -> GuidedRestorer:
    """Rebuild a :class:`GuidedRestorer` from a stage-2 checkpoint."""
    state, meta = load_state(path)
    rc = meta.get("restorer")
    rcfg = RestorerConfig(**rc) if rc else (cfg.stage2.restorer if cfg else RestorerConfig())
    model = GuidedRestorer(rcfg)
    model.load_state_dict(state["model"])
    model.eval()
    return model


def train_restorer(cfg: RunConfig, resume: bool = False, iters: int | None = None) -> RestorerTrainer:
    trainer = RestorerTrainer(cfg)
    ckpt = cfg.paths.restorer
    if resume:
        if not ckpt.exists():
            raise PipelineOrderError(f"no checkpoint to resume from at {ckpt}")
        trainer.load(ckpt)
    trainer.train(iters=iters, log_path=cfg.paths.logs / "restorer.csv", checkpoint_path=ckpt)
    return trainer


# ---------------------------------------------------------------------------
# Evaluation


def evaluate(model: GuidedRestorer, dataset_cfg: DatasetConfig, semantic_backend, out_dir=None) -> list[dict]:
    """Per-degradation PSNR/SSIM of degraded inputs and restored outputs."""
    ds = make_dataset(dataset_cfg)
    per_kind: dict[str, list] = {}
    model.eval()
    for s in ds:
        with torch.no_grad():
            x = to_nchw(s.degraded)
            out = to_hwc(model.restore(x, semantic_backend).clamp(0, 1))
        per_kind.setdefault(s.spec.kind, []).append(
            (psnr(s.degraded, s.clean), ssim(s.degraded, s.clean), psnr(out, s.clean), ssim(out, s.clean))
        )
    rows = []
    for kind, vals in per_kind.items():
        v = np.asarray(vals)
        rows.append({"kind": kind, "n": len(vals), "psnr_degraded": v[:, 0].mean(), "ssim_degraded": v[:, 1].mean(),
                     "psnr_restored": v[:, 2].mean(), "ssim_restored": v[:, 3].mean()})
    allv = np.concatenate([np.asarray(v) for v in per_kind.values()])
    rows.append({"kind": "average", "n": len(allv), "psnr_degraded": allv[:, 0].mean(), "ssim_degraded": allv[:, 1].mean(),
                 "psnr_restored": allv[:, 2].mean(), "ssim_restored": allv[:, 3].mean()})
    if out_dir is not None:
        write_eval_report(rows, Path(out_dir))
    return rows


def write_eval_report(rows: list[dict], out_dir: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / "eval.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in r.items()})
    kinds = [r["kind"] for r in rows]
    x = np.arange(len(kinds))
    fig, ax = plt.subplots(figsize=(1.5 + 1.2 * len(kinds), 3.2))
    ax.bar(x - 0.2, [r["psnr_degraded"] for r in rows], 0.4, label="degraded")
    ax.bar(x + 0.2, [r["psnr_restored"] for r in rows], 0.4, label="restored")
    ax.set_xticks(x, kinds)
    ax.set_ylabel("PSNR (dB)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_dir / "eval.png", dpi=100)
    plt.close(fig)
