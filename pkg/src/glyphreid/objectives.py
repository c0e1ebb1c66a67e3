"""Training objectives: queue-based InfoNCE (cross- and intra-modal),
image-text matching with hard negatives, positive-relation detection,
masked-token prediction, replaced-token detection, and their weighted
composition into the joint loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import Vocab, mask_tokens
from .errors import ConfigError, ContractError, NumericError
from .model import RetrievalModel


def info_nce(
    x: torch.Tensor,
    x_plus: torch.Tensor,
    queue_vectors: torch.Tensor,
    tau: torch.Tensor | float,
    queue_ids: np.ndarray | None = None,
    exclude_ids: np.ndarray | None = None,
) -> torch.Tensor:
    """Batch-mean InfoNCE with the positive prepended to the queue.

    For each row i the denominator runs over {x_plus[i]} union the queue;
    queue entries whose stored identity equals exclude_ids[i] are dropped
    (the positive itself is never dropped).
    """
    tau_val = float(tau) if not torch.is_tensor(tau) else float(tau.detach())
    if tau_val <= 0:
        raise ConfigError(f"temperature must be > 0, got {tau_val}")
    pos = (x * x_plus).sum(dim=-1, keepdim=True) / tau
    if queue_vectors.numel() == 0:
        logits = pos
    else:
        sims = x @ queue_vectors.t() / tau
        if exclude_ids is not None and queue_ids is not None and len(queue_ids):
            drop = torch.as_tensor(
                queue_ids[None, :] == np.asarray(exclude_ids)[:, None]
            )
            sims = sims.masked_fill(drop.to(sims.device), float("-inf"))
        logits = torch.cat([pos, sims], dim=1)
    return -F.log_softmax(logits, dim=1)[:, 0].mean()


def itc_loss(
    v_proj,
    t_proj,
    v_proj_momentum,
    t_proj_momentum,
    text_queue,
    image_queue,
    tau,
    identity_ids=None,
    exclude_same_identity: bool = True,
) -> torch.Tensor:
    """Cross-modal contrastive loss: image against momentum text (text queue
    as negatives) and text against momentum image, averaged and halved."""
    t_vecs, t_ids = text_queue.contents()
    v_vecs, v_ids = image_queue.contents()
    excl = identity_ids if exclude_same_identity else None
    a = info_nce(v_proj, t_proj_momentum, t_vecs, tau, t_ids, excl)
    b = info_nce(t_proj, v_proj_momentum, v_vecs, tau, v_ids, excl)
    return (a + b) / 2


def imc_loss(
    v_proj,
    t_proj,
    v_proj_momentum,
    t_proj_momentum,
    image_queue,
    text_queue,
    tau,
    identity_ids=None,
    exclude_same_identity: bool = True,
) -> torch.Tensor:
    """Intra-modal contrastive loss: each modality against its own momentum
    counterpart with the same-modality queue as negatives."""
    v_vecs, v_ids = image_queue.contents()
    t_vecs, t_ids = text_queue.contents()
    excl = identity_ids if exclude_same_identity else None
    a = info_nce(v_proj, v_proj_momentum, v_vecs, tau, v_ids, excl)
    b = info_nce(t_proj, t_proj_momentum, t_vecs, tau, t_ids, excl)
    return (a + b) / 2


def build_itm_negatives(
    similarity: torch.Tensor,
    identity_ids: np.ndarray,
    rng: np.random.Generator,
    uniform: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Pick one in-batch hard negative text per image and image per text.

    similarity[i, j] scores image i against text j. Candidates sharing the
    anchor's identity are excluded; the rest are sampled with probability
    proportional to the softmaxed similarity (or uniformly).
    Returns (neg_text_idx per image, neg_image_idx per text).
    """
    ids = np.asarray(identity_ids)
    n = len(ids)
    if len(set(ids.tolist())) < 2:
        raise ContractError("negative sampling needs >= 2 identities in the batch")
    sim = similarity.detach().cpu().double().numpy()

    def pick(row_scores: np.ndarray, anchor_id: int) -> int:
        eligible = np.where(ids != anchor_id)[0]
        if uniform:
            return int(eligible[rng.integers(0, len(eligible))])
        s = row_scores[eligible]
        w = np.exp(s - s.max())
        w = w / w.sum()
        return int(rng.choice(eligible, p=w))

    neg_text = np.array([pick(sim[i, :], ids[i]) for i in range(n)])
    neg_image = np.array([pick(sim[:, j], ids[j]) for j in range(n)])
    return neg_text, neg_image


def p_itm_loss(itm_logits: torch.Tensor, match_labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over positive+negative pairs; class 1 = matched."""
    return F.cross_entropy(itm_logits, match_labels)


def prd_loss(prd_logits: torch.Tensor, relation_labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over positive pairs; class 0 = strong, 1 = weak."""
    if prd_logits.shape[0] == 0:
        raise ContractError("relation detection needs at least one positive pair")
    return F.cross_entropy(prd_logits, relation_labels)


def mlm_loss(
    mlm_logits: torch.Tensor, targets: torch.Tensor
) -> torch.Tensor:
    """Mean cross-entropy over masked positions only.

    mlm_logits: (n_masked, vocab); targets: (n_masked,) original token ids.
    """
    if mlm_logits.shape[0] == 0:
        raise ContractError("no masked positions to predict")
    return F.cross_entropy(mlm_logits, targets)


@dataclass
class MaskedBatch:
    tokens: torch.Tensor           # (B, L) with mask tokens
    mask_positions: list[list[int]]
    originals: torch.Tensor        # (n_masked,) flattened in row order


def mask_token_batch(
    tokens: np.ndarray,
    pad_masks: np.ndarray,
    p_m: float,
    rng: np.random.Generator,
    vocab: Vocab,
) -> MaskedBatch:
    masked_rows, positions, originals = [], [], []
    for row, pad in zip(tokens, pad_masks):
        m, pos = mask_tokens(row, pad, p_m, rng, vocab)
        masked_rows.append(m)
        positions.append(pos)
        originals.extend(int(row[p]) for p in pos)
    return MaskedBatch(
        tokens=torch.from_numpy(np.stack(masked_rows)),
        mask_positions=positions,
        originals=torch.tensor(originals, dtype=torch.long),
    )


@dataclass
class ReplacedBatch:
    tokens: torch.Tensor          # (B, L) generator output spliced in
    replaced_flags: torch.Tensor  # (B, L) bool, True where token != original
    eligible: torch.Tensor        # (B, L) bool, non-special non-pad positions


@torch.no_grad()
def generate_replacement(
    generator: RetrievalModel,
    pixels: torch.Tensor,
    original_tokens: torch.Tensor,
    masked: MaskedBatch,
    pad_masks: torch.Tensor,
    vocab: Vocab,
    rng: np.random.Generator,
) -> ReplacedBatch:
    """Sample replacement tokens from the generator's masked-prediction
    distribution at the masked positions; copy everything else verbatim.

    The generator is run under no_grad, so no gradient can reach it.
    """
    was_training = generator.training
    generator.eval()
    try:
        img_seq = generator.encode_image(pixels)
        txt_seq = generator.encode_text(masked.tokens, pad_masks)
        fused = generator.fuse(img_seq, txt_seq, pad_masks)
        probs = generator.mlm_probabilities(fused)
    finally:
        generator.train(was_training)

    out = original_tokens.clone()
    flags = torch.zeros_like(original_tokens, dtype=torch.bool)
    p = probs.double().cpu().numpy()
    vocab_size = p.shape[-1]
    for b, pos_list in enumerate(masked.mask_positions):
        for pos in pos_list:
            w = p[b, pos]
            w = w / w.sum()
            token = int(rng.choice(vocab_size, p=w))
            flags[b, pos] = token != int(original_tokens[b, pos])
            out[b, pos] = token

    special = torch.zeros_like(out, dtype=torch.bool)
    for sid in vocab.special_ids:
        special |= original_tokens == sid
    eligible = ~(pad_masks | special)
    flags &= eligible
    return ReplacedBatch(tokens=out, replaced_flags=flags, eligible=eligible)


def m_rtd_loss(rtd_logits: torch.Tensor, replaced: ReplacedBatch) -> torch.Tensor:
    """Mean cross-entropy over eligible token positions; class 1 = replaced."""
    sel = replaced.eligible
    if int(sel.sum()) == 0:
        raise ContractError("no eligible positions for replacement detection")
    logits = rtd_logits[sel]
    targets = replaced.replaced_flags[sel].long()
    return F.cross_entropy(logits, targets)


@dataclass
class LossReport:
    itc: float
    imc: float
    cl: float
    p_itm: float
    prd: float
    ra: float
    mlm: float
    m_rtd: float
    sa: float
    total: float

    def to_dict(self) -> dict:
        return asdict(self)


def joint_loss(
    p_itm: torch.Tensor,
    prd: torch.Tensor,
    mlm: torch.Tensor,
    m_rtd: torch.Tensor,
    itc: torch.Tensor,
    imc: torch.Tensor,
    lambda1: float = 0.5,
    lambda2: float = 0.5,
    lambda3: float = 0.5,
) -> tuple[torch.Tensor, LossReport]:
    """Compose the weighted total; returns the differentiable scalar and a
    plain-float report satisfying the composition identities exactly."""
    def scalar(v):
        return float(v.detach()) if torch.is_tensor(v) else float(v)

    components = {
        "p_itm": p_itm, "prd": prd, "mlm": mlm,
        "m_rtd": m_rtd, "itc": itc, "imc": imc,
    }
    for name, value in components.items():
        if not math.isfinite(scalar(value)):
            raise NumericError(f"loss component {name} is not finite")
    ra = p_itm + lambda1 * prd
    sa = mlm + lambda2 * m_rtd
    cl = (itc + imc) / 2
    total = ra + sa + lambda3 * cl
    # report fields are composed in float64 so the identities hold exactly
    itc_f, imc_f = scalar(itc), scalar(imc)
    p_itm_f, prd_f = scalar(p_itm), scalar(prd)
    mlm_f, m_rtd_f = scalar(mlm), scalar(m_rtd)
    ra_f = p_itm_f + lambda1 * prd_f
    sa_f = mlm_f + lambda2 * m_rtd_f
    cl_f = (itc_f + imc_f) / 2
    report = LossReport(
        itc=itc_f, imc=imc_f, cl=cl_f,
        p_itm=p_itm_f, prd=prd_f, ra=ra_f,
        mlm=mlm_f, m_rtd=m_rtd_f, sa=sa_f,
        total=ra_f + sa_f + lambda3 * cl_f,
    )
    return total, report
