"""Two-stage text-to-image ranking and the R@K / mAP metrics.

Stage 1 ranks the whole gallery by cosine similarity of the projected
unimodal embeddings; stage 2 rescores the top-k shortlist with the
cross-encoder matching probability. Ties break toward the smaller image id.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .corpus import Corpus
from .errors import ContractError
from .model import RetrievalModel

DEFAULT_SHORTLIST = 128


@dataclass
class GalleryIndex:
    image_ids: np.ndarray      # (G,)
    identity_ids: np.ndarray   # (G,)
    proj: torch.Tensor         # (G, proj_dim) unit-norm
    vis_seq: torch.Tensor      # (G, M+1, hidden) for cross-encoder rescoring
    raw_cls: torch.Tensor      # (G, hidden) unnormalized CLS vectors

    def __len__(self) -> int:
        return len(self.image_ids)


@dataclass
class RankingResult:
    query_text_id: int
    image_ids: np.ndarray   # full gallery, final order
    scores: np.ndarray      # score used at each final position
    shortlist_k: int


@dataclass
class MetricsReport:
    r1: float
    r5: float
    r10: float
    map: float
    per_query_ap: list[float]

    def to_dict(self) -> dict:
        return {
            "r1": self.r1, "r5": self.r5, "r10": self.r10,
            "map": self.map, "per_query_ap": self.per_query_ap,
        }


@torch.no_grad()
def embed_gallery(
    model: RetrievalModel,
    pixels: np.ndarray,
    image_ids: np.ndarray,
    identity_ids: np.ndarray,
    batch_size: int = 64,
) -> GalleryIndex:
    if len(pixels) == 0:
        raise ContractError("gallery is empty")
    model.eval()
    seqs, projs = [], []
    for start in range(0, len(pixels), batch_size):
        chunk = torch.from_numpy(np.asarray(pixels[start : start + batch_size]))
        seq = model.encode_image(chunk)
        seqs.append(seq)
        projs.append(model.project(seq[:, 0], "image"))
    vis_seq = torch.cat(seqs)
    return GalleryIndex(
        image_ids=np.asarray(image_ids, dtype=np.int64),
        identity_ids=np.asarray(identity_ids, dtype=np.int64),
        proj=torch.cat(projs),
        vis_seq=vis_seq,
        raw_cls=vis_seq[:, 0].clone(),
    )


def _order_by_score(scores: np.ndarray, image_ids: np.ndarray) -> np.ndarray:
    """Indices sorted by descending score, ascending image id on ties."""
    return np.lexsort((image_ids, -scores))


@torch.no_grad()
def rank_two_stage(
    model: RetrievalModel,
    tokens: np.ndarray,
    pad_mask: np.ndarray,
    gallery: GalleryIndex,
    k: int | None = None,
    query_text_id: int = -1,
    use_raw_cls: bool = False,
) -> RankingResult:
    """Cosine shortlist, then cross-encoder rescoring of the top k.

    The final order is the rescored shortlist followed by the stage-1
    remainder. k is clipped to the gallery size.
    """
    model.eval()
    g = len(gallery)
    k = DEFAULT_SHORTLIST if k is None else k
    k = max(1, min(k, g))

    t_tokens = torch.from_numpy(tokens[None])
    t_pad = torch.from_numpy(pad_mask[None])
    t_seq = model.encode_text(t_tokens, t_pad)

    if use_raw_cls:
        q = t_seq[:, 0]
        ref = gallery.raw_cls
        stage1 = (
            (ref @ q.t()).squeeze(1)
            / (ref.norm(dim=-1) * q.norm(dim=-1) + 1e-12)
        ).numpy().astype(np.float64)
    else:
        t_proj = model.project(t_seq[:, 0], "text")
        stage1 = (gallery.proj @ t_proj.t()).squeeze(1).numpy().astype(np.float64)

    order1 = _order_by_score(stage1, gallery.image_ids)
    shortlist = order1[:k]
    remainder = order1[k:]

    vis = gallery.vis_seq[shortlist]
    fused = model.fuse(vis, t_seq.expand(len(shortlist), -1, -1), t_pad.expand(len(shortlist), -1))
    match_prob = model.itm_probabilities(fused[:, 0])[:, 1].numpy().astype(np.float64)

    re_order = _order_by_score(match_prob, gallery.image_ids[shortlist])
    final_idx = np.concatenate([shortlist[re_order], remainder])
    final_scores = np.concatenate([match_prob[re_order], stage1[remainder]])
    return RankingResult(
        query_text_id=query_text_id,
        image_ids=gallery.image_ids[final_idx],
        scores=final_scores,
        shortlist_k=k,
    )


def recall_at_k(
    ranked_image_ids: list[np.ndarray],
    relevant_sets: list[set[int]],
    k: int,
) -> float:
    """Percentage of queries whose top-k contains a relevant image."""
    if len(ranked_image_ids) != len(relevant_sets):
        raise ContractError("rankings and relevance lists disagree in length")
    hits = 0
    for ranked, relevant in zip(ranked_image_ids, relevant_sets):
        if not relevant:
            raise ContractError("query has no relevant image")
        if any(int(i) in relevant for i in ranked[:k]):
            hits += 1
    return 100.0 * hits / len(ranked_image_ids)


def average_precision(ranked_image_ids: np.ndarray, relevant: set[int]) -> float:
    if not relevant:
        raise ContractError("query has no relevant image")
    hits = 0
    total = 0.0
    for rank, image_id in enumerate(ranked_image_ids, start=1):
        if int(image_id) in relevant:
            hits += 1
            total += hits / rank
    return total / len(relevant)


def mean_average_precision(
    ranked_image_ids: list[np.ndarray], relevant_sets: list[set[int]]
) -> float:
    if len(ranked_image_ids) != len(relevant_sets):
        raise ContractError("rankings and relevance lists disagree in length")
    aps = [
        average_precision(r, rel) for r, rel in zip(ranked_image_ids, relevant_sets)
    ]
    return float(np.mean(aps))


def evaluate_retrieval(
    model: RetrievalModel,
    corpus: Corpus,
    split: str,
    k: int | None = None,
    use_raw_cls: bool = False,
) -> MetricsReport:
    """Rank the split's gallery for every text query and compute R@K / mAP.

    Relevance is identity-based: any image of the query's identity counts.
    """
    images = corpus.split_images(split)
    texts = corpus.split_texts(split)
    if not images or not texts:
        raise ContractError(f"split {split!r} is empty")
    gallery = embed_gallery(
        model,
        np.stack([im.pixels for im in images]),
        np.array([im.image_id for im in images]),
        np.array([im.identity_id for im in images]),
    )
    identity_of_image = {im.image_id: im.identity_id for im in images}

    rankings, relevant_sets, aps = [], [], []
    for text in texts:
        result = rank_two_stage(
            model, text.tokens, text.pad_mask, gallery, k=k,
            query_text_id=text.text_id, use_raw_cls=use_raw_cls,
        )
        relevant = {
            i for i, ident in identity_of_image.items() if ident == text.identity_id
        }
        rankings.append(result.image_ids)
        relevant_sets.append(relevant)
        aps.append(average_precision(result.image_ids, relevant))

    return MetricsReport(
        r1=recall_at_k(rankings, relevant_sets, 1),
        r5=recall_at_k(rankings, relevant_sets, 5),
        r10=recall_at_k(rankings, relevant_sets, 10),
        map=float(np.mean(aps)),
        per_query_ap=[float(a) for a in aps],
    )


def dump_rankings_tsv(results: list[RankingResult], path) -> None:
    with open(path, "w") as f:
        f.write("query_id\trank\timage_id\tscore\tstage\n")
        for res in results:
            for rank, (image_id, score) in enumerate(
                zip(res.image_ids, res.scores), start=1
            ):
                stage = 2 if rank <= res.shortlist_k else 1
                f.write(f"{res.query_text_id}\t{rank}\t{image_id}\t{score:.6f}\t{stage}\n")
