"""Training orchestration: batched forward passes, negative construction,
masking/replacement, backward on the joint loss, AdamW with two learning-rate
groups, EMA update of the slow model and queue maintenance.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import time
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import objectives as obj
from .corpus import Corpus, PairBatch, STRONG, WEAK, sample_pair_batch
from .errors import ConfigError, ContractError, NumericError
from .model import ModelConfig, RetrievalModel, save_checkpoint, load_checkpoint
from .momentum import MomentumModel, RepQueue

RTD_GENERATORS = ("momentum", "online", "frozen", "off")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr_heads: float = 1e-4
    lr_backbone: float = 1e-5
    weight_decay: float = 0.02
    m: float = 0.995
    queue_size: int = 1024
    p_w: float = 0.1
    p_m: float = 0.3
    lambda1: float = 0.5
    lambda2: float = 0.5
    lambda3: float = 0.5
    positive_mode: str = "probabilistic"
    rtd_generator: str = "momentum"
    enable_itm: bool = True
    enable_prd: bool = True
    enable_mlm: bool = True
    exclude_same_identity_negatives: bool = True
    uniform_itm_negatives: bool = False
    frozen_generator_step: int = 0
    seed: int = 0
    checkpoint_every: int = 0  # epochs; 0 = final checkpoint only

    def validate(self) -> None:
        for name in ("p_w", "p_m", "m"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if self.lr_heads <= 0 or self.lr_backbone <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.rtd_generator not in RTD_GENERATORS:
            raise ConfigError(f"rtd_generator must be one of {RTD_GENERATORS}")
        if self.queue_size < self.batch_size:
            raise ConfigError("queue_size must be >= batch_size")

    def fingerprint(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


def _param_groups(model: RetrievalModel, cfg: TrainConfig) -> list[dict]:
    """Heads at lr_heads, everything else at lr_backbone; weight decay only
    on matrices (biases, norms and the temperature are exempt)."""
    head_ids = {id(p) for p in model.head_parameters}
    groups = {
        ("heads", True): [], ("heads", False): [],
        ("backbone", True): [], ("backbone", False): [],
    }
    for p in model.parameters():
        kind = "heads" if id(p) in head_ids else "backbone"
        decay = p.ndim >= 2
        groups[(kind, decay)].append(p)
    out = []
    for (kind, decay), params in groups.items():
        if not params:
            continue
        out.append(
            {
                "params": params,
                "lr": cfg.lr_heads if kind == "heads" else cfg.lr_backbone,
                "weight_decay": cfg.weight_decay if decay else 0.0,
                "name": f"{kind}_{'decay' if decay else 'nodecay'}",
            }
        )
    return out


class Trainer:
    """Owns the online model, its EMA twin, the queues and the optimizer.

    Step effect order: momentum forward -> contrastive losses -> matching
    negatives + loss -> relation detection -> masked prediction ->
    replacement detection -> backward -> optimizer step -> EMA update ->
    enqueue.
    """

    def __init__(
        self,
        model: RetrievalModel,
        corpus: Corpus,
        cfg: TrainConfig,
        on_event: Callable[[str], None] | None = None,
    ):
        cfg.validate()
        self.model = model
        self.corpus = corpus
        self.cfg = cfg
        self.on_event = on_event or (lambda name: None)
        self.momentum = MomentumModel(model, cfg.m)
        dim = model.cfg.proj_dim
        self.image_queue = RepQueue(cfg.queue_size, dim)
        self.text_queue = RepQueue(cfg.queue_size, dim)
        self.optimizer = torch.optim.AdamW(_param_groups(model, cfg))
        self.rng = np.random.default_rng(cfg.seed)
        torch.manual_seed(cfg.seed)
        self.step = 0
        self.frozen_generator: RetrievalModel | None = None
        if cfg.rtd_generator == "frozen" and cfg.frozen_generator_step == 0:
            self._snapshot_frozen_generator()

    def _snapshot_frozen_generator(self) -> None:
        self.frozen_generator = copy.deepcopy(self.model)
        for p in self.frozen_generator.parameters():
            p.requires_grad_(False)
        self.frozen_generator.eval()

    def _generator(self) -> RetrievalModel:
        kind = self.cfg.rtd_generator
        if kind == "momentum":
            return self.momentum.model
        if kind == "online":
            return self.model
        if kind == "frozen":
            if self.frozen_generator is None:
                raise ContractError("frozen generator not yet snapshotted")
            return self.frozen_generator
        raise ContractError("rtd generator is off")

    def sample_batch(self) -> PairBatch:
        batch = sample_pair_batch(
            self.corpus, self.cfg.batch_size, self.cfg.p_w,
            self.cfg.positive_mode, self.rng, split="train",
        )
        if self.cfg.enable_itm and len(set(batch.identity_ids.tolist())) < 2:
            batch = sample_pair_batch(
                self.corpus, self.cfg.batch_size, self.cfg.p_w,
                self.cfg.positive_mode, self.rng, split="train",
            )
            if len(set(batch.identity_ids.tolist())) < 2:
                raise ContractError("batch degenerated to a single identity twice")
        return batch

    def train_step(self, batch: PairBatch) -> obj.LossReport:
        cfg = self.cfg
        model = self.model
        model.train()
        pixels = torch.from_numpy(batch.pixels)
        strong_pixels = torch.from_numpy(batch.strong_pixels)
        tokens = torch.from_numpy(batch.tokens)
        pad = torch.from_numpy(batch.pad_masks)
        relations = torch.from_numpy(batch.relation_labels)

        # (1) momentum forward: projections feeding CL and the queues
        self.on_event("momentum_forward")
        with torch.no_grad():
            mm = self.momentum.model
            v_hat = mm.project(mm.encode_image(pixels)[:, 0], "image")
            t_hat = mm.project(mm.encode_text(tokens, pad)[:, 0], "text")

        # (2) contrastive losses on online projections
        self.on_event("contrastive")
        v_seq = model.encode_image(pixels)
        t_seq = model.encode_text(tokens, pad)
        v_proj = model.project(v_seq[:, 0], "image")
        t_proj = model.project(t_seq[:, 0], "text")
        tau = model.tau()
        excl = batch.identity_ids if cfg.exclude_same_identity_negatives else None
        itc = obj.itc_loss(
            v_proj, t_proj, v_hat, t_hat, self.text_queue, self.image_queue,
            tau, excl, cfg.exclude_same_identity_negatives,
        )
        imc = obj.imc_loss(
            v_proj, t_proj, v_hat, t_hat, self.image_queue, self.text_queue,
            tau, excl, cfg.exclude_same_identity_negatives,
        )

        # (3) matching loss over positives + in-batch hard negatives
        p_itm = torch.tensor(0.0)
        fused_pos = None
        if cfg.enable_itm or cfg.enable_prd:
            fused_pos = model.fuse(v_seq, t_seq, pad)
        if cfg.enable_itm:
            self.on_event("matching")
            with torch.no_grad():
                sim = v_proj @ t_proj.t()
            neg_text, neg_image = obj.build_itm_negatives(
                sim, batch.identity_ids, self.rng, uniform=cfg.uniform_itm_negatives
            )
            fused_nt = model.fuse(v_seq, t_seq[neg_text], pad[neg_text])
            fused_ni = model.fuse(v_seq[neg_image], t_seq, pad)
            logits = model.itm_logits(
                torch.cat([fused_pos[:, 0], fused_nt[:, 0], fused_ni[:, 0]])
            )
            n = len(batch)
            labels = torch.cat(
                [torch.ones(n, dtype=torch.long), torch.zeros(2 * n, dtype=torch.long)]
            )
            p_itm = obj.p_itm_loss(logits, labels)

        # (4) relation detection on the positive pairs
        prd = torch.tensor(0.0)
        if cfg.enable_prd:
            self.on_event("relation_detection")
            prd = obj.prd_loss(model.prd_logits(fused_pos[:, 0]), relations)

        # (5)+(6) token-level tasks on the strong pair of each text
        mlm = torch.tensor(0.0)
        m_rtd = torch.tensor(0.0)
        need_masking = cfg.enable_mlm or cfg.rtd_generator != "off"
        if need_masking:
            self.on_event("masked_prediction")
            masked = obj.mask_token_batch(
                batch.tokens, batch.pad_masks, cfg.p_m, self.rng, self.corpus.vocab
            )
            s_img_seq = model.encode_image(strong_pixels)
            if cfg.enable_mlm:
                msk_seq = model.encode_text(masked.tokens, pad)
                fused_msk = model.fuse(s_img_seq, msk_seq, pad)
                rows = torch.cat(
                    [
                        torch.full((len(p),), b, dtype=torch.long)
                        for b, p in enumerate(masked.mask_positions)
                    ]
                )
                cols = torch.tensor(
                    [p for ps in masked.mask_positions for p in ps], dtype=torch.long
                )
                mlm = obj.mlm_loss(
                    model.mlm_logits(fused_msk[rows, cols]), masked.originals
                )
            if cfg.rtd_generator != "off":
                self.on_event("replacement_detection")
                replaced = obj.generate_replacement(
                    self._generator(), strong_pixels, tokens, masked, pad,
                    self.corpus.vocab, self.rng,
                )
                rep_seq = model.encode_text(replaced.tokens, pad)
                fused_rep = model.fuse(s_img_seq, rep_seq, pad)
                m_rtd = obj.m_rtd_loss(model.rtd_logits(fused_rep), replaced)

        # (7) compose and backpropagate
        self.on_event("backward")
        try:
            total, report = obj.joint_loss(
                p_itm, prd, mlm, m_rtd, itc, imc,
                cfg.lambda1, cfg.lambda2, cfg.lambda3,
            )
        except NumericError as e:
            raise NumericError(f"step {self.step}: {e}") from e
        self.optimizer.zero_grad()
        total.backward()

        # (8) optimizer step, (9) EMA, (10) enqueue
        self.on_event("optimizer_step")
        self.optimizer.step()
        self.on_event("ema_update")
        self.momentum.ema_update(self.model)
        self.on_event("enqueue")
        self.image_queue.enqueue(v_hat, batch.identity_ids)
        self.text_queue.enqueue(t_hat, batch.identity_ids)

        self.step += 1
        if (
            cfg.rtd_generator == "frozen"
            and self.frozen_generator is None
            and self.step >= cfg.frozen_generator_step
        ):
            self._snapshot_frozen_generator()
        return report


def steps_per_epoch(corpus: Corpus, batch_size: int) -> int:
    n = len(corpus.split_texts("train"))
    if n == 0:
        raise ContractError("corpus has no train split")
    return max(1, math.ceil(n / batch_size))


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    corpus: Corpus,
    out_dir: str | Path,
    resume_from: str | Path | None = None,
    max_steps: int | None = None,
) -> dict:
    """Run the full loop; writes checkpoints and a JSON-lines loss log.

    Returns a summary dict with paths and the final step count.
    """
    train_cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    start_epoch = 0
    if resume_from is not None:
        model, mom, step, extra = load_checkpoint(resume_from)
        if extra.get("train_config") != asdict(train_cfg):
            raise ConfigError("checkpoint train config does not match")
        trainer = Trainer(model, corpus, train_cfg)
        trainer.step = step
        if mom is not None:
            trainer.momentum.model.load_state_dict(mom.state_dict())
        start_epoch = extra.get("epoch", 0)
    else:
        torch.manual_seed(train_cfg.seed)
        model = RetrievalModel(model_cfg)
        trainer = Trainer(model, corpus, train_cfg)

    spe = steps_per_epoch(corpus, train_cfg.batch_size)
    log_path = out / "train_log.jsonl"
    mode = "a" if resume_from is not None else "w"
    stopped = False
    epoch_reached = train_cfg.epochs
    with open(log_path, mode) as log:
        for epoch in range(start_epoch, train_cfg.epochs):
            for _ in range(spe):
                t0 = time.monotonic()
                report = trainer.train_step(trainer.sample_batch())
                log.write(
                    json.dumps(
                        {
                            "step": trainer.step,
                            "epoch": epoch,
                            "loss": report.to_dict(),
                            "lr_heads": train_cfg.lr_heads,
                            "lr_backbone": train_cfg.lr_backbone,
                            "seconds": time.monotonic() - t0,
                        }
                    )
                    + "\n"
                )
                if max_steps is not None and trainer.step >= max_steps:
                    stopped = True
                    epoch_reached = epoch
                    break
            if (
                train_cfg.checkpoint_every
                and (epoch + 1) % train_cfg.checkpoint_every == 0
            ):
                save_checkpoint(
                    out / f"checkpoint_ep{epoch + 1}.npz",
                    trainer.model,
                    trainer.momentum.model,
                    step=trainer.step,
                    extra={"train_config": asdict(train_cfg), "epoch": epoch + 1},
                )
            if stopped:
                break

    final = out / "checkpoint_final.npz"
    save_checkpoint(
        final,
        trainer.model,
        trainer.momentum.model,
        step=trainer.step,
        extra={"train_config": asdict(train_cfg), "epoch": epoch_reached},
    )
    return {
        "checkpoint": str(final),
        "log": str(log_path),
        "steps": trainer.step,
        "trainer": trainer,
    }


@torch.no_grad()
def evaluate_heads(
    model: RetrievalModel,
    momentum_model: RetrievalModel,
    corpus: Corpus,
    split: str,
    p_m: float,
    seed: int = 0,
) -> dict:
    """Accuracy of the relation-detection head on strong/weak positives and
    of the replacement-detection head at replaced positions."""
    model.eval()
    rng = np.random.default_rng(seed)
    texts = corpus.split_texts(split)
    if not texts:
        raise ContractError(f"no texts in split {split!r}")

    prd_hits = prd_total = 0
    rtd_hits = rtd_total = 0
    for text in texts:
        pairs = [(corpus.image(text.source_image_id), STRONG)]
        others = [
            i for i in corpus.images_of_identity(text.identity_id)
            if i != text.source_image_id
        ]
        if others:
            pick = int(others[rng.integers(0, len(others))])
            pairs.append((corpus.image(pick), WEAK))

        tokens = torch.from_numpy(text.tokens[None])
        pad = torch.from_numpy(text.pad_mask[None])
        t_seq = model.encode_text(tokens, pad)
        for image, label in pairs:
            px = torch.from_numpy(image.pixels[None])
            fused = model.fuse(model.encode_image(px), t_seq, pad)
            pred = int(model.prd_probabilities(fused[:, 0]).argmax())
            prd_hits += int(pred == label)
            prd_total += 1

        # replacement detection on the strong pair
        masked = obj.mask_token_batch(
            text.tokens[None], text.pad_mask[None], p_m, rng, corpus.vocab
        )
        strong_px = torch.from_numpy(corpus.image(text.source_image_id).pixels[None])
        replaced = obj.generate_replacement(
            momentum_model, strong_px, tokens, masked, pad, corpus.vocab, rng
        )
        flags = replaced.replaced_flags[0]
        if bool(flags.any()):
            rep_seq = model.encode_text(replaced.tokens, pad)
            fused = model.fuse(model.encode_image(strong_px), rep_seq, pad)
            preds = model.rtd_probabilities(fused[0]).argmax(dim=-1)
            rtd_hits += int((preds[flags] == 1).sum())
            rtd_total += int(flags.sum())

    return {
        "prd_accuracy": prd_hits / prd_total if prd_total else float("nan"),
        "rtd_accuracy": rtd_hits / rtd_total if rtd_total else float("nan"),
        "prd_pairs": prd_total,
        "rtd_positions": rtd_total,
    }


def ablate(
    rows: dict[str, TrainConfig],
    model_cfg: ModelConfig,
    corpus: Corpus,
    seeds: list[int],
    out_path: str | Path | None = None,
    eval_split: str = "test",
    shortlist_k: int | None = None,
) -> list[dict]:
    """Train/evaluate one row per named config, sharing seeds across rows.

    Returns a list of row dicts (name, config fingerprint, per-seed and
    median metrics); optionally writes them as TSV with a JSON column.
    """
    from dataclasses import replace
    from .retrieval import evaluate_retrieval

    results = []
    for name, cfg in rows.items():
        per_seed = []
        for seed in seeds:
            run_cfg = replace(cfg, seed=seed)
            import tempfile

            with tempfile.TemporaryDirectory() as tmp:
                summary = train(model_cfg, run_cfg, corpus, tmp)
                trainer = summary["trainer"]
                metrics = evaluate_retrieval(
                    trainer.model, corpus, eval_split, k=shortlist_k
                )
                per_seed.append({"seed": seed, **metrics.to_dict()})
        medians = {
            key: float(np.median([s[key] for s in per_seed]))
            for key in ("r1", "r5", "r10", "map")
        }
        results.append(
            {
                "name": name,
                "fingerprint": cfg.fingerprint(),
                "config": asdict(cfg),
                "per_seed": per_seed,
                "median": medians,
            }
        )
    if out_path is not None:
        write_ablation_table(results, out_path)
    return results


def write_ablation_table(rows: list[dict], path: str | Path) -> None:
    with open(path, "w") as f:
        f.write("name\tfingerprint\tr1\tr5\tr10\tmap\tdetail_json\n")
        for row in rows:
            med = row["median"]
            f.write(
                "\t".join(
                    [
                        row["name"],
                        row["fingerprint"],
                        f"{med['r1']:.4f}",
                        f"{med['r5']:.4f}",
                        f"{med['r10']:.4f}",
                        f"{med['map']:.6f}",
                        json.dumps(row, sort_keys=True),
                    ]
                )
                + "\n"
            )


def read_ablation_table(path: str | Path) -> list[dict]:
    rows = []
    with open(path) as f:
        header = f.readline()
        for line in f:
            rows.append(json.loads(line.rstrip("\n").split("\t")[6]))
    return rows
