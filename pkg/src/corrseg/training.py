"""End-to-end training harness: the four experiment arms, the plateau/early-
stop schedule, seeded determinism, and checkpointing with exact resume."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, MODES, format_config, parse_config_items, apply_config_items
from .generator import generation_loss
from .losses import deep_supervision_dice, one_hot_labels, total_loss
from .metrics import region_metrics
from .segnet import GeneratorSegmentationModel, SegmentationModel
from .volumes import Case, LabelVolume, MODALITIES, Modality, normalize_intensity

# Test-time substitution pairs for the 'replace' arm: the canonical contrast
# partners (FLAIR stands in for T2 and vice versa; T1 and T1c swap).
REPLACEMENT_PARTNER = {
    Modality.T2: Modality.FLAIR,
    Modality.FLAIR: Modality.T2,
    Modality.T1: Modality.T1C,
    Modality.T1C: Modality.T1,
}


class TrainingDivergence(RuntimeError):
    """Raised when the training loss goes non-finite."""


def case_to_tensors(case: Case) -> tuple[dict[Modality, torch.Tensor], torch.Tensor]:
    """Normalized modality tensors [1, 1, D, H, W] plus labels [1, D, H, W]."""
    vols = {
        m: torch.from_numpy(normalize_intensity(v).data.copy()).reshape(1, 1, *case.shape)
        for m, v in case.modalities.items()
    }
    labels = torch.from_numpy(case.labels.data.astype(np.int64)).unsqueeze(0)
    return vols, labels


def batch_tensors(cases: list[Case]) -> tuple[dict[Modality, torch.Tensor], torch.Tensor]:
    if not cases:
        raise ValueError("empty batch")
    per_case = [case_to_tensors(c) for c in cases]
    keys = set(per_case[0][0])
    if any(set(v) != keys for v, _ in per_case):
        raise ValueError("all cases in a batch must carry the same modalities")
    vols = {m: torch.cat([v[m] for v, _ in per_case]) for m in keys}
    labels = torch.cat([l for _, l in per_case])
    return vols, labels


class PlateauScheduler:
    """Halve the learning rate after `patience` stagnant epochs and request a
    stop after `stop_patience` stagnant epochs.

    Improvement means a strictly lower validation loss than the best seen.
    The epoch right after a reduction is a grace epoch: it does not count
    toward the next reduction (so with patience 10 the reductions land on
    stagnant epochs 11, 22, ... while the independent stop counter fires once
    `stop_patience` stagnant epochs accumulate).
    """

    def __init__(self, initial_lr: float, factor: float, patience: int, stop_patience: int):
        self.lr = initial_lr
        self.factor = factor
        self.patience = patience
        self.stop_patience = stop_patience
        self.best = math.inf
        self.wait_lr = 0
        self.wait_stop = 0
        self.cooldown = 0

    def step(self, val_loss: float) -> tuple[bool, bool]:
        """Returns (improved, should_stop)."""
        if val_loss < self.best:
            self.best = val_loss
            self.wait_lr = 0
            self.wait_stop = 0
            self.cooldown = 0
            return True, False
        self.wait_stop += 1
        if self.cooldown > 0:
            self.cooldown -= 1
        else:
            self.wait_lr += 1
            if self.wait_lr >= self.patience:
                self.lr *= self.factor
                self.wait_lr = 0
                self.cooldown = 1
        return False, self.wait_stop >= self.stop_patience

    def state(self) -> dict[str, float]:
        return {
            "lr": self.lr,
            "best": self.best,
            "wait_lr": self.wait_lr,
            "wait_stop": self.wait_stop,
            "cooldown": self.cooldown,
        }

    def load_state(self, state: dict) -> None:
        self.lr = float(state["lr"])
        self.best = float(state["best"])
        self.wait_lr = int(state["wait_lr"])
        self.wait_stop = int(state["wait_stop"])
        self.cooldown = int(state["cooldown"])


def build_model(mode: str, config: ExperimentConfig) -> torch.nn.Module:
    if mode == "direct_cc_cg":
        return GeneratorSegmentationModel(config.net, config.shape)
    if mode == "replace":
        return SegmentationModel(config.net, config.shape, num_branches=4)
    if mode == "direct":
        return SegmentationModel(config.net, config.shape, num_branches=3)
    if mode == "direct_cc":
        return SegmentationModel(config.net, config.shape, num_branches=3, use_correlation=True)
    raise ValueError(f"unknown mode {mode!r}")


class Trainer:
    """Owns the model, optimizer, schedule, and RNG streams for one run."""

    def __init__(self, config: ExperimentConfig):
        if config.mode not in MODES:
            raise ValueError(f"unknown mode {config.mode!r}")
        self.config = config
        torch.manual_seed(config.train.seed)
        self.model = build_model(config.mode, config)
        self.optimizer = torch.optim.NAdam(
            self.model.parameters(),
            lr=config.train.initial_lr,
            betas=(0.9, 0.999),
            eps=1e-8,
        )
        self.scheduler = PlateauScheduler(
            config.train.initial_lr,
            config.train.lr_factor,
            config.train.lr_patience,
            config.train.early_stop_patience,
        )
        self.rng = np.random.default_rng((config.train.seed & 0xFFFFFFFFFFFFFFFF, 1))
        self.epoch = 0
        self.stopped = False
        self.best_val = math.inf
        self.best_epoch = 0
        self.best_state = {k: v.detach().clone() for k, v in self.model.state_dict().items()}
        self.history: dict[str, list[float]] = {"train_loss": [], "val_loss": [], "lr": []}
        self._param_names = [name for name, _ in self.model.named_parameters()]

    # -- loss graphs ---------------------------------------------------------

    def _choose_missing(self) -> Modality:
        fixed = self.config.train.fixed_missing()
        if fixed is not None:
            return fixed
        return MODALITIES[int(self.rng.integers(0, 4))]

    def _compute_loss(self, cases: list[Case], missing: Modality) -> torch.Tensor:
        mode = self.config.mode
        vols, labels = batch_tensors(cases)
        onehot = one_hot_labels(labels)
        weights = self.config.train.loss_weights
        if mode == "replace":
            seg = self.model.segment_direct(vols)
            return deep_supervision_dice(seg.aux_probabilities, onehot)
        available = {m: v for m, v in vols.items() if m is not missing}
        if mode == "direct":
            seg = self.model.segment_direct(available)
            return deep_supervision_dice(seg.aux_probabilities, onehot)
        if mode == "direct_cc":
            seg, features, correlated = self.model.forward_parts(available, use_correlation=True)
            l_dice = deep_supervision_dice(seg.aux_probabilities, onehot)
            l_cc = self.model.correlation.loss(features, correlated)
            return total_loss(l_dice, 0.0, l_cc, weights)
        generated = self.model.generate(available, missing)
        seg, features, correlated = self.model.forward_parts(
            available, generated, missing, use_correlation=True
        )
        l_dice = deep_supervision_dice(seg.aux_probabilities, onehot)
        l_gen = generation_loss(generated, vols[missing])
        l_cc = self.model.correlation.loss(features, correlated)
        return total_loss(l_dice, l_gen, l_cc, weights)

    # -- epoch loop -----------------------------------------------------------

    def _validation_loss(self, val_cases: list[Case]) -> float:
        fixed = self.config.train.fixed_missing()
        self.model.eval()
        losses = []
        with torch.no_grad():
            for i, case in enumerate(val_cases):
                missing = fixed if fixed is not None else MODALITIES[i % 4]
                losses.append(float(self._compute_loss([case], missing)))
        return float(np.mean(losses))

    def run(
        self,
        train_cases: list[Case],
        val_cases: list[Case],
        log=None,
        max_epochs: int | None = None,
    ) -> dict:
        """Train until max_epochs or early stop; returns the history dict.

        `max_epochs` pauses the schedule earlier than the configured limit
        (checkpoint + resume continues the identical trajectory)."""
        if not train_cases or not val_cases:
            raise ValueError("need nonempty train and validation case lists")
        cfg = self.config.train
        limit = cfg.max_epochs if max_epochs is None else min(max_epochs, cfg.max_epochs)
        while self.epoch < limit and not self.stopped:
            self.epoch += 1
            lr = self.scheduler.lr
            for group in self.optimizer.param_groups:
                group["lr"] = lr
            order = self.rng.permutation(len(train_cases))
            self.model.train()
            batch_losses = []
            for start in range(0, len(order), cfg.batch_size):
                batch = [train_cases[i] for i in order[start : start + cfg.batch_size]]
                missing = self._choose_missing()
                loss = self._compute_loss(batch, missing)
                if not torch.isfinite(loss):
                    raise TrainingDivergence(
                        f"non-finite loss at epoch {self.epoch} ({self.config.mode})"
                    )
                self.optimizer.zero_grad()
                loss.backward()
                self.optimizer.step()
                batch_losses.append(float(loss.detach()))
            train_loss = float(np.mean(batch_losses))
            val_loss = self._validation_loss(val_cases)
            improved, should_stop = self.scheduler.step(val_loss)
            if improved:
                self.best_val = val_loss
                self.best_epoch = self.epoch
                self.best_state = {
                    k: v.detach().clone() for k, v in self.model.state_dict().items()
                }
            self.stopped = should_stop
            self.history["train_loss"].append(train_loss)
            self.history["val_loss"].append(val_loss)
            self.history["lr"].append(lr)
            if log is not None:
                log(
                    f"epoch {self.epoch:3d}  lr {lr:.2e}  "
                    f"train {train_loss:.4f}  val {val_loss:.4f}"
                )
        return self.history

    # -- evaluation ------------------------------------------------------------

    def best_model(self) -> torch.nn.Module:
        """Fresh model carrying the best-validation parameters."""
        rng_state = torch.get_rng_state()
        try:
            model = build_model(self.config.mode, self.config)
        finally:
            torch.set_rng_state(rng_state)
        model.load_state_dict(self.best_state)
        model.eval()
        return model

    # -- checkpoint io -----------------------------------------------------------

    def save(self, path: Path | str) -> None:
        header: dict[str, str] = {
            "mode": self.config.mode,
            "epoch": str(self.epoch),
            "stopped": str(int(self.stopped)),
            "best_epoch": str(self.best_epoch),
            "best_val_loss": repr(self.best_val),
        }
        for key, value in self.scheduler.state().items():
            header[f"scheduler.{key}"] = repr(value)
        for line in format_config(self.config).splitlines():
            key, _, value = line.partition(" = ")
            header[f"config.{key}"] = value
        for name, values in self.history.items():
            header[f"history.{name}"] = ",".join(repr(v) for v in values)
        header["rng.data"] = json.dumps(self.rng.bit_generator.state)
        header["rng.torch"] = torch.get_rng_state().numpy().tobytes().hex()

        arrays: dict[str, np.ndarray] = {}
        for key, tensor in self.model.state_dict().items():
            arrays[f"model/{key}"] = tensor.detach().numpy()
        for key, tensor in self.best_state.items():
            arrays[f"best/{key}"] = tensor.detach().numpy()
        param_by_name = dict(zip(self._param_names, self.optimizer.param_groups[0]["params"]))
        for name, param in param_by_name.items():
            state = self.optimizer.state.get(param, {})
            for slot, tensor in state.items():
                arrays[f"optim/{name}/{slot}"] = tensor.detach().numpy()
        save_checkpoint(path, header, arrays)

    @classmethod
    def load(cls, path: Path | str) -> "Trainer":
        header, arrays = load_checkpoint(path)
        config_lines = "\n".join(
            f"{key[len('config.'):]} = {value}"
            for key, value in header.items()
            if key.startswith("config.")
        )
        config = apply_config_items(
            ExperimentConfig(mode=header["mode"]), parse_config_items(config_lines)
        )
        trainer = cls(config)
        trainer.epoch = int(header["epoch"])
        trainer.stopped = bool(int(header["stopped"]))
        trainer.best_epoch = int(header["best_epoch"])
        trainer.best_val = float(header["best_val_loss"])
        trainer.scheduler.load_state(
            {k[len("scheduler."):]: float(v) for k, v in header.items() if k.startswith("scheduler.")}
        )
        for name in trainer.history:
            packed = header.get(f"history.{name}", "")
            trainer.history[name] = [float(v) for v in packed.split(",") if v]

        model_state = {
            key[len("model/"):]: torch.from_numpy(arr)
            for key, arr in arrays.items()
            if key.startswith("model/")
        }
        trainer.model.load_state_dict(model_state)
        trainer.best_state = {
            key[len("best/"):]: torch.from_numpy(arr)
            for key, arr in arrays.items()
            if key.startswith("best/")
        }
        param_by_name = dict(zip(trainer._param_names, trainer.optimizer.param_groups[0]["params"]))
        for key, arr in arrays.items():
            if not key.startswith("optim/"):
                continue
            name, slot = key[len("optim/"):].rsplit("/", 1)
            param = param_by_name[name]
            trainer.optimizer.state.setdefault(param, {})[slot] = torch.from_numpy(arr.copy())
        for group in trainer.optimizer.param_groups:
            group["lr"] = trainer.scheduler.lr
        trainer.rng.bit_generator.state = json.loads(header["rng.data"])
        torch.set_rng_state(
            torch.tensor(list(bytes.fromhex(header["rng.torch"])), dtype=torch.uint8)
        )
        return trainer


def train(config: ExperimentConfig, train_cases: list[Case], val_cases: list[Case], log=None) -> Trainer:
    """Build a Trainer for the configured arm and run the full schedule."""
    trainer = Trainer(config)
    trainer.run(train_cases, val_cases, log=log)
    return trainer


def predict_case(model: torch.nn.Module, mode: str, case: Case, missing: Modality) -> LabelVolume:
    """Predicted class map for one case under the given missing-modality
    scenario, using the mode's input graph (substitution, direct, or
    generate-then-segment)."""
    vols, _ = batch_tensors([case])
    with torch.no_grad():
        if mode == "replace":
            inputs = dict(vols)
            inputs[missing] = vols[REPLACEMENT_PARTNER[missing]]
            seg = model.segment_direct(inputs)
        elif mode == "direct_cc_cg":
            available = {m: v for m, v in vols.items() if m is not missing}
            generated = model.generate(available, missing)
            seg = model.segment(available, generated, missing)
        else:
            available = {m: v for m, v in vols.items() if m is not missing}
            seg = model.segment_direct(available)
    return LabelVolume(seg.predicted_classes()[0].numpy().astype(np.uint8))


def evaluate(trainer: Trainer, cases: list[Case], missing: Modality) -> dict:
    """Mean per-region metrics of the best checkpoint over `cases`, for one
    missing-modality scenario. Deterministic."""
    if not cases:
        raise ValueError("empty case list")
    model = trainer.best_model()
    sums: dict[str, dict[str, float]] = {}
    for case in cases:
        pred = predict_case(model, trainer.config.mode, case, missing)
        result = region_metrics(pred, case.labels)
        for region, metrics_ in result.items():
            bucket = sums.setdefault(region, {"dsc": 0.0, "hd": 0.0})
            for metric, value in metrics_.items():
                bucket[metric] += value
    n = len(cases)
    return {
        region: {metric: value / n for metric, value in bucket.items()}
        for region, bucket in sums.items()
    }
