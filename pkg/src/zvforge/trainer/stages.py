"""Three-stage training: joint pre-training, multi-task instruction tuning, dialogue tuning."""
from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .. import tensor as T
from ..adaptation import Profile, Stage, STAGE_ORDER, apply_trainable, group_of, resolve_trainable
from ..checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from ..evalkit.retrieval import retrieval_at_k
from ..model import LoRAConfig, VisionLanguageModel
from ..objectives import IGNORE, ObjectivesConfig, joint_loss
from ..qformer import BOS, MaskMode, QFormerConfig, pad_batch, project_queries
from .data import SyntheticCorpus, split_instruction
from .optim import OptimizerState, TrainConfig, adamw_step, clip_gradients

TRACE_COLUMNS = ("step", "itc", "itg", "itm", "r_at_1", "loss")


class MissingCheckpointError(FileNotFoundError):
    pass


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class StageReport:
    stage: Stage
    profile: Profile
    steps: int
    final_losses: Dict[str, float]
    trace: List[Dict[str, float]]
    checkpoint_path: Optional[Path]
    trace_path: Optional[Path] = None
    step_losses: List[float] = field(default_factory=list)
    frozen_hashes_before: Dict[str, str] = field(default_factory=dict)
    frozen_hashes_after: Dict[str, str] = field(default_factory=dict)
    retrieval: Dict[str, float] = field(default_factory=dict)


def group_hashes(model: VisionLanguageModel, groups=None) -> Dict[str, str]:
    """sha256 over each parameter group's bytes, in name order."""
    digests: Dict[str, "hashlib._Hash"] = {}
    for name, p in sorted(model.named_parameters(), key=lambda kv: kv[0]):
        g = group_of(name)
        if groups is not None and g not in groups:
            continue
        h = digests.setdefault(g, hashlib.sha256())
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return {g: h.hexdigest() for g, h in sorted(digests.items())}


def corpus_for(qcfg: QFormerConfig, cfg: TrainConfig) -> SyntheticCorpus:
    return SyntheticCorpus(cfg.num_concepts, qcfg.image_patches, qcfg.image_feat_dim, qcfg.vocab_size,
                           seed=cfg.seed, noise=cfg.image_noise)


def prepare_model(stage, profile, qcfg: QFormerConfig, cfg: TrainConfig,
                  ocfg: Optional[ObjectivesConfig] = None, lora: Optional[LoRAConfig] = None,
                  resume=None) -> VisionLanguageModel:
    stage, profile = Stage(stage), Profile(profile)
    ocfg = ocfg or ObjectivesConfig()
    lora = lora or LoRAConfig()
    if stage is not Stage.PRETRAIN and resume is None:
        raise MissingCheckpointError(
            f"stage {stage.value} needs the checkpoint of the previous stage (--resume)")
    model = VisionLanguageModel(qcfg, seed=cfg.seed, temperature=ocfg.temperature_init)
    arrays = None
    if resume is not None:
        resume = Path(resume)
        if not resume.is_file():
            raise MissingCheckpointError(f"checkpoint not found: {resume}")
        arrays, _ = load_checkpoint(resume)
    has_lora = arrays is not None and any(n.startswith("lora.") for n in arrays)
    if lora.enabled_for(stage, profile) or has_lora:
        model.attach_adapters(lora)
    if arrays is not None:
        try:
            missing = model.load_arrays(arrays)
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"{resume}: {exc}") from None
        non_lora = [m for m in missing if not m.startswith("lora.")]
        if non_lora:
            raise CheckpointError(f"{resume}: missing parameters {non_lora[:5]}")
    return model


def instruction_loss(model: VisionLanguageModel, images: np.ndarray, seqs, profile) -> T.Tensor:
    """Decoder cross-entropy on response tokens, conditioned on projected query tokens."""
    profile = Profile(profile)
    feats = model.encode_images(images)
    if profile is Profile.CHAT:
        instr = pad_batch([split_instruction(t, m) for t, m in seqs])
        out = model.qformer.encode_instructed(model.queries, feats, instr)
    else:
        out = model.qformer.encode(model.queries, feats, None, MaskMode.ITC)
    prefix = project_queries(model.projection, out.query_states)
    inputs = pad_batch([[BOS] + list(t[:-1]) for t, _ in seqs])
    targets = pad_batch([[tok if m else IGNORE for tok, m in zip(t, mk)] for t, mk in seqs], pad=IGNORE)
    logits = model.decoder(prefix, inputs)
    return T.cross_entropy(logits, targets, ignore_index=IGNORE)


def _negative_strategy(profile: Profile, ocfg: ObjectivesConfig) -> str:
    return ocfg.negatives_chat if profile is Profile.CHAT else ocfg.negatives_base


def evaluate(model: VisionLanguageModel, corpus: SyntheticCorpus, ocfg: ObjectivesConfig,
             stage: Stage, profile: Profile, eval_seqs=None) -> Dict[str, float]:
    """Joint losses and in-batch retrieval on a fixed batch holding every concept once."""
    batch = corpus.eval_batch()
    bounds = (ocfg.temperature_min, ocfg.temperature_max)
    with T.no_grad():
        jl = joint_loss(model, batch, deterministic_negatives=True, strategy="hard", bounds=bounds,
                        weights=(ocfg.itc_weight, ocfg.itg_weight, ocfg.itm_weight))
        ir, tr = retrieval_at_k(jl.sim.s, 1)
        row = {"itc": jl.itc.item(), "itg": jl.itg.item(), "itm": jl.itm.item(),
               "ir_at_1": ir, "tr_at_1": tr, "r_at_1": 0.5 * (ir + tr)}
        if stage is Stage.PRETRAIN:
            row["loss"] = jl.total.item()
        else:
            images, seqs = eval_seqs
            row["loss"] = instruction_loss(model, images, seqs, profile).item()
    return row


def run_stage(stage, profile, corpus: Optional[SyntheticCorpus], cfg: TrainConfig,
              qcfg: Optional[QFormerConfig] = None, ocfg: Optional[ObjectivesConfig] = None,
              lora: Optional[LoRAConfig] = None, out_dir=None, resume=None,
              steps: Optional[int] = None, model: Optional[VisionLanguageModel] = None,
              log=None) -> StageReport:
    stage, profile = Stage(stage), Profile(profile)
    qcfg = qcfg or QFormerConfig()
    ocfg = ocfg or ObjectivesConfig()
    lora = lora or LoRAConfig()
    corpus = corpus or corpus_for(qcfg, cfg)
    if model is None:
        model = prepare_model(stage, profile, qcfg, cfg, ocfg, lora, resume)
    lora_stages = [Stage(s) for s in lora.stages]
    trainable = resolve_trainable(stage, profile, lora_stages)
    params = apply_trainable(model.named_parameters(), trainable)
    frozen_groups = {group_of(n) for n, _ in model.named_parameters()} - set(trainable.open)
    hashes_before = group_hashes(model, frozen_groups)

    n_steps = cfg.steps_for(stage) if steps is None else steps
    stage_idx = STAGE_ORDER.index(stage)
    rng = np.random.default_rng([cfg.seed, stage_idx, 1])
    eval_rng = np.random.default_rng([cfg.seed, stage_idx, 2])
    eval_seqs = None
    if stage is Stage.MULTITASK:
        eval_seqs = corpus.multitask_batch(corpus.num_concepts, eval_rng, cfg.task_sampling)
    elif stage is Stage.SCENE_AWARE:
        eval_seqs = corpus.dialogue_batch(corpus.num_concepts, eval_rng)
    strategy = _negative_strategy(profile, ocfg)
    bounds = (ocfg.temperature_min, ocfg.temperature_max)
    weights = (ocfg.itc_weight, ocfg.itg_weight, ocfg.itm_weight)
    opt = OptimizerState()
    trace: List[Dict[str, float]] = []
    step_losses: List[float] = []

    def record(step):
        row = {"step": step, **evaluate(model, corpus, ocfg, stage, profile, eval_seqs)}
        trace.append(row)
        if log is not None:
            log(f"[{stage.value}/{profile.value}] step {step}: "
                + " ".join(f"{k}={row[k]:.4f}" for k in TRACE_COLUMNS[1:]))

    record(0)
    for step in range(1, n_steps + 1):
        if stage is Stage.PRETRAIN:
            batch, _ = corpus.batch(cfg.batch_size, rng)
            loss = joint_loss(model, batch, deterministic_negatives=ocfg.deterministic_negatives,
                              strategy=strategy, rng=rng, weights=weights,
                              symmetric=ocfg.symmetric_negatives, bounds=bounds).total
        elif stage is Stage.MULTITASK:
            images, seqs = corpus.multitask_batch(cfg.batch_size, rng, cfg.task_sampling)
            loss = instruction_loss(model, images, seqs, profile)
        else:
            images, seqs = corpus.dialogue_batch(cfg.batch_size, rng)
            loss = instruction_loss(model, images, seqs, profile)
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteLossError(f"{stage.value}: loss became {value} at step {step}")
        step_losses.append(value)
        loss.backward()
        if cfg.clip_enabled:
            clip_gradients(params, cfg.grad_clip)
        adamw_step(params, opt, cfg)
        if "temperature" in trainable.open:
            model.temperature.data = np.clip(model.temperature.data, *bounds).astype(model.temperature.data.dtype)
        for p in params.values():
            p.grad = None
        if step % cfg.eval_interval == 0 or step == n_steps:
            record(step)

    hashes_after = group_hashes(model, frozen_groups)
    ckpt_path = trace_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        stem = f"{stage.value}-{profile.value}"
        meta = {"stage": stage.value, "profile": profile.value, "steps": n_steps, "seed": cfg.seed}
        ckpt_path = save_checkpoint(out_dir / f"{stem}.ckpt",
                                    {n: p.data for n, p in model.named_parameters()}, meta)
        trace_path = write_trace(out_dir / f"{stem}.trace.csv", trace)
    final = dict(trace[-1])
    return StageReport(stage=stage, profile=profile, steps=n_steps,
                       final_losses={k: final[k] for k in ("itc", "itg", "itm", "loss")},
                       trace=trace, checkpoint_path=ckpt_path, trace_path=trace_path,
                       step_losses=step_losses, frozen_hashes_before=hashes_before,
                       frozen_hashes_after=hashes_after,
                       retrieval={"ir_at_1": final["ir_at_1"], "tr_at_1": final["tr_at_1"],
                                  "r_at_1": final["r_at_1"]})


def write_trace(path, trace) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for row in trace:
            w.writerow([row["step"]] + [f"{row[k]:.6f}" for k in TRACE_COLUMNS[1:]])
    return path
