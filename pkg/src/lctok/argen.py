"""Caption-conditioned autoregressive token generator with classifier-free guidance.

Input layout for a token sequence ``t_1 .. t_L``::

    [cond] [sos] t_1 ... t_{L-1}   ->   predicts t_1 ... t_L

``cond`` is the projected caption embedding (or the learned null embedding
when the condition is dropped). Token id ``N`` is the start-of-sequence.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import nncore
from .data import MAX_CAPTION_LEN, VOCAB, WORD_ID, PAD, encode_caption
from .errors import ContractViolation, IntegrityError
from .nncore import TrainResult, TrainState


class TextEmbedder(nn.Module):
    """Word + slot embeddings summed over the non-pad caption words, then an MLP.

    Slot (position) embeddings keep "red circle ... blue square" apart from
    "blue circle ... red square", which a pure bag of words would merge.
    """

    def __init__(self, dim: int = 64, max_len: int = MAX_CAPTION_LEN):
        super().__init__()
        self.words = nn.Embedding(len(VOCAB), dim, padding_idx=WORD_ID[PAD])
        self.slots = nn.Parameter(0.02 * torch.randn(max_len, dim))
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))
        self.null = nn.Parameter(0.02 * torch.randn(dim))
        self.dim = dim

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        mask = (ids != WORD_ID[PAD]).unsqueeze(-1).to(self.slots.dtype)
        h = ((self.words(ids) + self.slots[: ids.shape[1]]) * mask).sum(1)
        return self.mlp(h / mask.sum(1).clamp(min=1.0))

    def null_embedding(self, n: int) -> torch.Tensor:
        return self.null.expand(n, -1)


class CausalBlock(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width))
        self.heads = heads

    def forward(self, x):
        b, n, d = x.shape
        q, k, v = self.qkv(self.ln1(x)).view(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        a = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        x = x + self.proj(a.transpose(1, 2).reshape(b, n, d))
        return x + self.mlp(self.ln2(x))


class ArModel(nn.Module):
    def __init__(self, n_codes: int = 512, seq_len: int = 64, width: int = 128, layers: int = 4,
                 heads: int = 4, text_dim: int = 64):
        super().__init__()
        if width % heads:
            raise ContractViolation("width must be divisible by heads")
        self.n_codes = n_codes
        self.seq_len = seq_len
        self.text = TextEmbedder(text_dim)
        self.cond_proj = nn.Sequential(nn.Linear(text_dim, width), nn.SiLU(), nn.Linear(width, width))
        self.tok = nn.Embedding(n_codes + 1, width)
        self.pos = nn.Parameter(0.02 * torch.randn(seq_len + 1, width))
        self.blocks = nn.ModuleList([CausalBlock(width, heads) for _ in range(layers)])
        self.ln_f = nn.LayerNorm(width)
        self.head = nn.Linear(width, n_codes)

    @property
    def sos(self) -> int:
        return self.n_codes

    def condition(self, caption_ids: torch.Tensor, drop: torch.Tensor | None = None) -> torch.Tensor:
        """f_text per row; rows where ``drop`` is true get the null embedding."""
        f = self.text(caption_ids)
        if drop is not None:
            f = torch.where(drop[:, None], self.text.null_embedding(len(f)), f)
        return f

    def forward(self, f_text: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        """Logits ``(B, k + 1, N)`` for positions 1..k+1 given the first ``k`` tokens."""
        b, k = tokens.shape
        if k > self.seq_len:
            raise ContractViolation(f"sequence longer than {self.seq_len}")
        check_tokens(tokens, self.n_codes)
        sos = torch.full((b, 1), self.sos, dtype=torch.long)
        x = self.tok(torch.cat([sos, tokens], 1)) + self.pos[: k + 1]
        x = torch.cat([self.cond_proj(f_text)[:, None], x], 1)
        for blk in self.blocks:
            x = blk(x)
        return self.head(self.ln_f(x[:, 1:]))


def check_tokens(tokens: torch.Tensor, n_codes: int) -> None:
    if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= n_codes):
        raise ContractViolation(f"token outside [0, {n_codes})")


def text_condition(model: ArModel, caption: Sequence[str]) -> torch.Tensor:
    ids = torch.tensor([encode_caption(caption)], dtype=torch.long)
    return model.text(ids)[0]


def drop_mask(n: int, drop_prob: float, gen: torch.Generator | None = None) -> torch.Tensor:
    if not 0.0 <= drop_prob <= 1.0:
        raise ContractViolation("drop_prob outside [0, 1]")
    return torch.rand(n, generator=gen) < drop_prob


def ar_loss(model: ArModel, tokens: torch.Tensor, caption_ids: torch.Tensor, drop_prob: float = 0.1,
            gen: torch.Generator | None = None, drop: torch.Tensor | None = None):
    """Mean next-token cross-entropy in nats; ``drop`` overrides the random dropout mask."""
    check_tokens(tokens, model.n_codes)
    drop = drop_mask(len(tokens), drop_prob, gen) if drop is None else drop
    logits = model(model.condition(caption_ids, drop), tokens[:, :-1])
    return F.cross_entropy(logits.reshape(-1, model.n_codes), tokens.reshape(-1))


def cfg_logits(logits_c: torch.Tensor, logits_u: torch.Tensor, s: float) -> torch.Tensor:
    """``l_u + s (l_c - l_u)``, evaluated in float64 and cast back to the input dtype."""
    if logits_c.shape != logits_u.shape:
        raise ContractViolation("conditional and unconditional logits differ in shape")
    lc, lu = logits_c.double(), logits_u.double()
    return (lu + s * (lc - lu)).to(logits_c.dtype)


@torch.no_grad()
def generate(model: ArModel, caption_ids: torch.Tensor, L: int | None = None, s: float = 1.0,
             sampling: str = "greedy", seed: int | Sequence[int] = 0, top_k: int = 64,
             temperature: float = 1.0) -> torch.Tensor:
    """Sample ``L`` tokens per caption row with CFG scale ``s``."""
    if s < 0:
        raise ContractViolation("CFG scale must be nonnegative")
    if sampling not in ("greedy", "top-k"):
        raise ContractViolation("sampling must be 'greedy' or 'top-k'")
    L = L or model.seq_len
    b = len(caption_ids)
    seeds = [seed * 1_000_003 + i for i in range(b)] if isinstance(seed, int) else list(seed)
    gens = [torch.Generator().manual_seed(int(x)) for x in seeds]
    f_c = model.condition(caption_ids)
    f_both = torch.cat([f_c, model.text.null_embedding(b)])
    out = torch.zeros(b, 0, dtype=torch.long)
    for _ in range(L):
        logits = model(f_both, torch.cat([out, out]))[:, -1]
        lg = cfg_logits(logits[:b], logits[b:], s)
        if sampling == "greedy":
            nxt = lg.argmax(-1)
        else:
            vals, idx = (lg / temperature).topk(min(top_k, lg.shape[-1]), dim=-1)
            probs = vals.softmax(-1)
            pick = torch.stack([torch.multinomial(p, 1, generator=g) for p, g in zip(probs, gens)])
            nxt = idx.gather(1, pick)[:, 0]
        out = torch.cat([out, nxt[:, None]], 1)
    return out


def train_argen(model: ArModel, tokens: torch.Tensor, caption_ids: torch.Tensor, cfg,
                steps: int | None = None, drop_prob: float | None = None,
                resume: TrainState | None = None, on_checkpoint=None, every: int = 0) -> TrainResult:
    """Minimise :func:`ar_loss` over random minibatches of the tokenized corpus."""
    steps = cfg.ar_steps if steps is None else steps
    drop_prob = cfg.drop_prob if drop_prob is None else drop_prob
    check_tokens(tokens, model.n_codes)
    torch.manual_seed(cfg.seed + 6)
    gen = torch.Generator().manual_seed(cfg.seed + 6)
    opt = nncore.Adam(model, cfg.ar_lr, betas=(cfg.adam_beta1, cfg.adam_beta2),
                      warmup=min(100, steps // 10), total_steps=steps)
    res = TrainResult()
    bs = min(cfg.ar_batch, len(tokens))

    def step_fn(step):
        idx = torch.randperm(len(tokens), generator=gen)[:bs]
        res.curve.append((step, opt.step(ar_loss(model, tokens[idx], caption_ids[idx], drop_prob, gen))))

    nncore.run_steps(steps, step_fn, opt, gen, resume, on_checkpoint, every, {"ar": model})
    res.state = TrainState(steps, opt.state, gen.get_state())
    return res


@torch.no_grad()
def corpus_loss(model: ArModel, tokens, caption_ids, drop: bool = False, bs: int = 256) -> float:
    """Mean per-token cross-entropy over a whole corpus with the condition kept or dropped."""
    total = 0.0
    for i in range(0, len(tokens), bs):
        t, c = tokens[i:i + bs], caption_ids[i:i + bs]
        mask = torch.full((len(t),), drop)
        total += ar_loss(model, t, c, drop=mask).item() * len(t)
    return total / len(tokens)


# -- tokenized dataset file ----------------------------------------------------

MAGIC = b"LCTKSEQ1"
_HEAD = struct.Struct("<III")


def write_tokenized(path: Path | str, tokens: torch.Tensor, n_codes: int,
                    captions: Sequence[Sequence[str]]) -> None:
    """Header ``(N, L, count)``, raster tokens as little-endian uint16, then a JSON caption list."""
    tokens = tokens.reshape(len(tokens), -1)
    check_tokens(tokens, n_codes)
    if len(captions) != len(tokens):
        raise ContractViolation("one caption per sequence required")
    blob = json.dumps([" ".join(c) for c in captions]).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEAD.pack(n_codes, tokens.shape[1], len(tokens)))
        fh.write(tokens.numpy().astype("<u2").tobytes())
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)


def read_tokenized(path: Path | str) -> tuple[torch.Tensor, int, list[list[str]]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC or len(raw) < 8 + _HEAD.size:
        raise IntegrityError(f"{path}: not a tokenized dataset file")
    n_codes, L, count = _HEAD.unpack_from(raw, 8)
    off = 8 + _HEAD.size
    nbytes = 2 * L * count
    if len(raw) < off + nbytes + 4:
        raise IntegrityError(f"{path}: truncated token payload")
    toks = np.frombuffer(raw, dtype="<u2", count=L * count, offset=off).astype(np.int64).reshape(count, L)
    off += nbytes
    (clen,) = struct.unpack_from("<I", raw, off)
    if len(raw) != off + 4 + clen:
        raise IntegrityError(f"{path}: caption block length mismatch")
    captions = [c.split() for c in json.loads(raw[off + 4:].decode("utf-8"))]
    if toks.size and toks.max() >= n_codes:
        raise IntegrityError(f"{path}: token id exceeds N={n_codes}")
    return torch.from_numpy(toks), n_codes, captions
