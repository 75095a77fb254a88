"""
Attention encoder-decoder that reads a page image into its transcript.

The encoder is three stride-2 convolution blocks (stride 8 overall) with
fixed positional channels appended. The decoder is an LSTM fed
``[E[y_{t-1}]; c_{t-1}]`` followed by additive attention over the flattened
feature grid; the output distribution is

    softmax(W (E[y_{t-1}] + W_h h_t + W_c c_t))

Everything runs in float64 numpy with hand-written backward passes.
"""

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from .config import Hyperparams
from .curriculum import EpochLog, StageResult, StopRule, run_schedule, run_stage
from .errors import (
    CorruptArtifactError,
    DivergenceError,
    FormatVersionError,
    ImageTooLargeError,
    LoadError,
    ShapeError,
    UnknownTokenError,
)
from .formats import header_for
from .imaging import read_image, resize, to_grayscale
from .metrics import crr
from .models import LINE_SEPARATOR, CurriculumManifest, EvalPair, ManifestEntry, PointPrediction
from .nn import (
    attention_backward,
    attention_forward,
    conv2d_backward,
    conv2d_forward,
    finite_difference_check,
    lstm_backward,
    lstm_forward,
    positional_encoding,
    relu_backward,
    relu_forward,
    softmax,
    softmax_xent,
)
from .optim import AdaDelta, clip_global_norm, global_norm

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

SPECIALS = ("<pad>", "<sos>", "<eos>", "<sep>")
PAD, SOS, EOS, SEP = range(len(SPECIALS))
ENCODER_STRIDE = 8
ARCH_FIELDS = ("conv_channels", "feature_dim", "pos_dims", "embed_dim", "hidden_dim", "attn_dim")
GRAD_CHECK_TOLERANCE = 1e-4
KINK_MARGIN = 1e-3


class Vocabulary:
    """Special tokens first, then transcript symbols; ``<sep>`` stands for a line break."""

    def __init__(self, symbols: Iterable[str]):
        symbols = list(symbols)
        if LINE_SEPARATOR in symbols or any(s in SPECIALS for s in symbols):
            raise ValueError("vocabulary symbols must not include the line separator or special tokens")
        if len(set(symbols)) != len(symbols):
            raise ValueError("vocabulary symbols must be unique")
        self.tokens: List[str] = list(SPECIALS) + symbols
        self._index = {tok: i for i, tok in enumerate(self.tokens)}

    @classmethod
    def from_transcripts(cls, texts: Iterable[str]) -> "Vocabulary":
        chars = set()
        for text in texts:
            chars.update(text)
        chars.discard(LINE_SEPARATOR)
        return cls(sorted(chars))

    @property
    def symbols(self) -> List[str]:
        return self.tokens[len(SPECIALS):]

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def missing(self, texts: Iterable[str]) -> List[str]:
        chars = set()
        for text in texts:
            chars.update(text)
        chars.discard(LINE_SEPARATOR)
        return sorted(c for c in chars if c not in self._index or c in SPECIALS)

    def encode(self, text: str) -> List[int]:
        ids = []
        for ch in text:
            if ch == LINE_SEPARATOR:
                ids.append(SEP)
            elif ch in self._index and ch not in SPECIALS:
                ids.append(self._index[ch])
            else:
                raise UnknownTokenError(f"symbol {ch!r} (U+{ord(ch):04X}) is not in the vocabulary")
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            if i == SEP:
                out.append(LINE_SEPARATOR)
            elif i >= len(SPECIALS):
                out.append(self.tokens[i])
        return "".join(out)


def arch_of(hp: Hyperparams) -> Dict[str, Any]:
    arch = {name: getattr(hp, name) for name in ARCH_FIELDS}
    arch["conv_channels"] = list(arch["conv_channels"])
    return arch


def param_shapes(arch: Dict[str, Any], vocab_size: int) -> Dict[str, Tuple[int, ...]]:
    c1, c2 = arch["conv_channels"]
    f = arch["feature_dim"]
    d = f + arch["pos_dims"]
    m, hd, a = arch["embed_dim"], arch["hidden_dim"], arch["attn_dim"]
    return {
        "enc.conv1.w": (3, 3, 1, c1),
        "enc.conv1.b": (c1,),
        "enc.conv2.w": (3, 3, c1, c2),
        "enc.conv2.b": (c2,),
        "enc.conv3.w": (3, 3, c2, f),
        "enc.conv3.b": (f,),
        "emb.E": (vocab_size, m),
        "lstm.wx": (4 * hd, m + d),
        "lstm.wh": (4 * hd, hd),
        "lstm.b": (4 * hd,),
        "att.wa": (hd, a),
        "att.u": (d, a),
        "att.b": (a,),
        "att.v": (a,),
        "out.W": (vocab_size, m),
        "out.W_h": (m, hd),
        "out.W_c": (m, d),
    }


@dataclass
class ModelParams:
    """All learnable tensors plus the vocabulary and architecture they belong to."""

    tensors: Dict[str, np.ndarray]
    vocab: Vocabulary
    arch: Dict[str, Any]

    @classmethod
    def init(cls, hp: Hyperparams, vocab: Vocabulary, seed: Optional[int] = None) -> "ModelParams":
        arch = arch_of(hp)
        rng = np.random.default_rng(hp.seed if seed is None else seed)
        tensors = {}
        for name, shape in sorted(param_shapes(arch, len(vocab)).items()):
            if name.endswith(".b"):
                value = np.zeros(shape)
                if name == "lstm.b":
                    hd = arch["hidden_dim"]
                    value[hd:2 * hd] = 1.0
            elif name.startswith("enc."):
                fan_in = shape[0] * shape[1] * shape[2]
                value = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
            else:
                value = rng.normal(0.0, hp.init_scale, size=shape)
            tensors[name] = value
        return cls(tensors=tensors, vocab=vocab, arch=arch)

    @classmethod
    def zeros(cls, hp: Hyperparams, vocab: Vocabulary) -> "ModelParams":
        arch = arch_of(hp)
        tensors = {name: np.zeros(shape) for name, shape in param_shapes(arch, len(vocab)).items()}
        return cls(tensors=tensors, vocab=vocab, arch=arch)

    def copy(self) -> "ModelParams":
        return ModelParams(
            tensors={k: v.copy() for k, v in self.tensors.items()},
            vocab=self.vocab,
            arch=dict(self.arch),
        )


@dataclass
class FeatureGrid:
    """Encoder output: (rows, cols, D) values; ``stride`` pixels per cell; ``image_size`` is (width, height)."""

    values: np.ndarray
    stride: Tuple[int, int]
    image_size: Tuple[int, int]

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1, self.values.shape[2])


@dataclass
class AttentionMap:
    weights: np.ndarray


@dataclass
class DecoderState:
    h: np.ndarray
    m: np.ndarray
    c: np.ndarray


@dataclass
class DecodeResult:
    tokens: List[int]
    maps: List[AttentionMap]
    truncated: bool
    grid: FeatureGrid
    text: str = ""


def prepare_image(image: np.ndarray, max_side: int) -> Tuple[np.ndarray, float]:
    """
    Downsize so the longer side is at most ``max_side``.

    Returns:
        (image, scale) with ``scale`` <= 1 the factor applied to both axes
    """
    height, width = image.shape[:2]
    longest = max(height, width)
    if longest <= max_side:
        return image, 1.0
    scale = max_side / longest
    new_w = min(max_side, max(1, int(round(width * scale))))
    new_h = min(max_side, max(1, int(round(height * scale))))
    logger.debug("rescaling %dx%d image to %dx%d", width, height, new_w, new_h)
    return resize(image, new_w, new_h), scale


def locate_from_attention(amap: AttentionMap, grid: FeatureGrid) -> Tuple[float, float]:
    """
    Pixel center of the strongest attention cell, first in row-major order on ties.

    The point is clipped into the image when the last cell overhangs it.
    """
    if amap.weights.shape != (grid.rows, grid.cols):
        raise ValueError(f"attention map {amap.weights.shape} does not match grid {(grid.rows, grid.cols)}")
    row, col = divmod(int(np.argmax(amap.weights)), grid.cols)
    width, height = grid.image_size
    x = min((col + 0.5) * grid.stride[0], width - 0.5)
    y = min((row + 0.5) * grid.stride[1], height - 0.5)
    return float(x), float(y)


class Recognizer:
    """
    Forward, decode and gradient computations for one set of parameters.

    ``logit_scale`` multiplies the output logits (temperature); decoding by
    argmax does not depend on it.
    """

    def __init__(self, params: ModelParams, max_side: int = 512, logit_scale: float = 1.0):
        self.params = params
        self.max_side = max_side
        self.logit_scale = logit_scale

    @property
    def vocab(self) -> Vocabulary:
        return self.params.vocab

    def _input(self, image: np.ndarray) -> np.ndarray:
        height, width = image.shape[:2]
        if max(height, width) > self.max_side:
            raise ImageTooLargeError(
                f"image {width}x{height} exceeds max side {self.max_side}; rescale it with prepare_image first"
            )
        if image.ndim == 3:
            gray = to_grayscale(image)
        elif image.dtype == np.uint8:
            gray = image.astype(np.float64) / 255.0
        else:
            gray = image.astype(np.float64)
        return (1.0 - gray)[:, :, None]

    def _encode_forward(self, image: np.ndarray) -> Tuple[np.ndarray, list]:
        t = self.params.tensors
        h = self._input(image)
        caches = []
        for i in (1, 2, 3):
            h, conv_cache = conv2d_forward(h, t[f"enc.conv{i}.w"], t[f"enc.conv{i}.b"])
            h, relu_cache = relu_forward(h)
            caches.append((conv_cache, relu_cache))
        rows, cols = h.shape[:2]
        feats = np.concatenate([h, positional_encoding(rows, cols, self.params.arch["pos_dims"])], axis=2)
        return feats, caches

    def encode(self, image: np.ndarray) -> FeatureGrid:
        feats, _ = self._encode_forward(image)
        height, width = image.shape[:2]
        return FeatureGrid(values=feats, stride=(ENCODER_STRIDE, ENCODER_STRIDE), image_size=(width, height))

    def initial_state(self, grid: FeatureGrid) -> DecoderState:
        hd = self.params.arch["hidden_dim"]
        return DecoderState(h=np.zeros(hd), m=np.zeros(hd), c=np.zeros(grid.values.shape[2]))

    def attend(self, state: DecoderState, grid: FeatureGrid) -> Tuple[np.ndarray, AttentionMap]:
        t = self.params.tensors
        flat = grid.flat
        context, alpha, _ = attention_forward(state.h, flat, flat @ t["att.u"], t["att.wa"], t["att.b"], t["att.v"])
        return context, AttentionMap(alpha.reshape(grid.rows, grid.cols))

    def _step(self, prev: int, h, m, c, flat, keys):
        t = self.params.tensors
        e = t["emb.E"][prev]
        h, m, lstm_cache = lstm_forward(np.concatenate([e, c]), h, m, t["lstm.wx"], t["lstm.wh"], t["lstm.b"])
        c, alpha, att_cache = attention_forward(h, flat, keys, t["att.wa"], t["att.b"], t["att.v"])
        u = e + t["out.W_h"] @ h + t["out.W_c"] @ c
        logits = self.logit_scale * (t["out.W"] @ u)
        return logits, h, m, c, alpha, (prev, lstm_cache, att_cache, u, h, c)

    def decode_step(
        self, prev: int, state: DecoderState, grid: FeatureGrid
    ) -> Tuple[np.ndarray, DecoderState, AttentionMap]:
        if not 0 <= prev < len(self.vocab):
            raise UnknownTokenError(f"token id {prev} outside vocabulary of {len(self.vocab)}")
        flat = grid.flat
        logits, h, m, c, alpha, _ = self._step(prev, state.h, state.m, state.c, flat,
                                               flat @ self.params.tensors["att.u"])
        return softmax(logits), DecoderState(h=h, m=m, c=c), AttentionMap(alpha.reshape(grid.rows, grid.cols))

    def greedy_decode(self, image: np.ndarray, max_len: int = 64) -> DecodeResult:
        """Argmax decoding from ``<sos>`` until ``<eos>`` or ``max_len`` tokens (then ``truncated``)."""
        grid = self.encode(image)
        flat = grid.flat
        keys = flat @ self.params.tensors["att.u"]
        state = self.initial_state(grid)
        h, m, c = state.h, state.m, state.c
        tokens: List[int] = []
        maps: List[AttentionMap] = []
        prev = SOS
        truncated = True
        for _ in range(max_len):
            logits, h, m, c, alpha, _ = self._step(prev, h, m, c, flat, keys)
            token = int(np.argmax(logits))
            if token == EOS:
                truncated = False
                break
            tokens.append(token)
            maps.append(AttentionMap(alpha.reshape(grid.rows, grid.cols)))
            prev = token
        return DecodeResult(tokens=tokens, maps=maps, truncated=truncated, grid=grid, text=self.vocab.decode(tokens))

    def _forward(self, image: np.ndarray, ids: Sequence[int]):
        feats, enc_caches = self._encode_forward(image)
        flat = feats.reshape(-1, feats.shape[2])
        keys = flat @ self.params.tensors["att.u"]
        hd = self.params.arch["hidden_dim"]
        h, m, c = np.zeros(hd), np.zeros(hd), np.zeros(flat.shape[1])
        inputs = [SOS] + list(ids)
        targets = list(ids) + [EOS]
        loss = 0.0
        steps = []
        for prev, target in zip(inputs, targets):
            logits, h, m, c, _, cache = self._step(prev, h, m, c, flat, keys)
            step_loss, _, dlogits = softmax_xent(logits, target)
            loss += step_loss
            steps.append((cache, dlogits))
        return loss / len(targets), (feats, enc_caches, flat, steps)

    def loss(self, image: np.ndarray, ids: Sequence[int]) -> float:
        """Mean per-step cross-entropy of the teacher-forced sequence ``ids`` + ``<eos>``."""
        return self._forward(image, ids)[0]

    def loss_and_grads(self, image: np.ndarray, ids: Sequence[int]) -> Tuple[float, Dict[str, np.ndarray]]:
        t = self.params.tensors
        loss, (feats, enc_caches, flat, steps) = self._forward(image, ids)
        grads = {k: np.zeros_like(v) for k, v in t.items()}
        n = len(steps)
        embed_dim = t["emb.E"].shape[1]
        hd = self.params.arch["hidden_dim"]
        dflat = np.zeros_like(flat)
        dkeys = np.zeros((flat.shape[0], t["att.u"].shape[1]))
        dh_next, dm_next, dc_next = np.zeros(hd), np.zeros(hd), np.zeros(flat.shape[1])

        for (prev, lstm_cache, att_cache, u, h, c), dlogits in reversed(steps):
            dlogits = dlogits * (self.logit_scale / n)
            grads["out.W"] += np.outer(dlogits, u)
            du = t["out.W"].T @ dlogits
            grads["emb.E"][prev] += du
            grads["out.W_h"] += np.outer(du, h)
            grads["out.W_c"] += np.outer(du, c)
            dh = t["out.W_h"].T @ du + dh_next
            dc = t["out.W_c"].T @ du + dc_next

            dh_att, dfeats, dk, dwa, dba, dv = attention_backward(dc, att_cache)
            dflat += dfeats
            dkeys += dk
            grads["att.wa"] += dwa
            grads["att.b"] += dba
            grads["att.v"] += dv
            dh += dh_att

            dx, dh_next, dm_next, dwx, dwh, db = lstm_backward(dh, dm_next, lstm_cache)
            grads["lstm.wx"] += dwx
            grads["lstm.wh"] += dwh
            grads["lstm.b"] += db
            grads["emb.E"][prev] += dx[:embed_dim]
            dc_next = dx[embed_dim:]

        grads["att.u"] += flat.T @ dkeys
        dflat += dkeys @ t["att.u"].T
        rows, cols = feats.shape[:2]
        # positional channels are constant
        d_enc = dflat.reshape(rows, cols, -1)[:, :, :self.params.arch["feature_dim"]]
        for i in (3, 2, 1):
            conv_cache, relu_cache = enc_caches[i - 1]
            d_enc = relu_backward(d_enc, relu_cache)
            d_enc, dw, db = conv2d_backward(d_enc, conv_cache)
            grads[f"enc.conv{i}.w"] += dw
            grads[f"enc.conv{i}.b"] += db
        return loss, grads


def read_characters(
    model: Recognizer,
    image: np.ndarray,
    codepoints: Optional[Dict[str, int]] = None,
    max_len: int = 64,
) -> Tuple[DecodeResult, List[PointPrediction]]:
    """
    Decode a page of any size and place each character at its attention peak.

    Points are in the original image's pixel coordinates. ``codepoints`` maps
    symbols to codepoints (default ``ord``); line breaks get no point.
    """
    prepared, scale = prepare_image(image, model.max_side)
    result = model.greedy_decode(prepared, max_len)
    codepoints = codepoints or {}
    height, width = image.shape[:2]
    points = []
    for token, amap in zip(result.tokens, result.maps):
        if token < len(SPECIALS):
            continue
        symbol = model.vocab.tokens[token]
        x, y = locate_from_attention(amap, result.grid)
        points.append(PointPrediction(
            codepoint=codepoints.get(symbol, ord(symbol[0])),
            x=min(x / scale, width - 0.5),
            y=min(y / scale, height - 0.5),
        ))
    return result, points


class RecognizerTrainer:
    """
    Owns the optimizer loop for one :class:`Recognizer`.

    Images are loaded on a small thread pool in the seeded shuffle order,
    so arrival timing never changes the batches.
    """

    def __init__(
        self,
        model: Recognizer,
        hp: Hyperparams,
        root: Optional[PathLike] = None,
        workers: int = 2,
        progress: bool = False,
        literal_crr: bool = False,
        include_separator: bool = True,
    ):
        self.model = model
        self.hp = hp
        self.root = Path(root) if root is not None else None
        self.workers = max(1, workers)
        self.progress = progress
        self.literal_crr = literal_crr
        self.include_separator = include_separator
        self.optimizer = AdaDelta(hp.rho, hp.epsilon, hp.scale)
        self.update_norms: List[float] = []
        self._images: Dict[str, np.ndarray] = {}

    def _load(self, image_path: str) -> np.ndarray:
        image = self._images.get(image_path)
        if image is None:
            path = Path(image_path)
            if self.root is not None and not path.is_absolute():
                path = self.root / path
            image, _ = prepare_image(read_image(path), self.hp.max_side)
            self._images[image_path] = image
        return image

    def reset_optimizer(self) -> None:
        self.optimizer.reset()

    def _update(self, batch: List[Tuple[np.ndarray, List[int]]], epoch: int, number: int) -> float:
        total_loss = 0.0
        total = None
        for image, ids in batch:
            loss, grads = self.model.loss_and_grads(image, ids)
            total_loss += loss
            if total is None:
                total = grads
            else:
                for k in total:
                    total[k] += grads[k]
        loss = total_loss / len(batch)
        grads = {k: g / len(batch) for k, g in total.items()}
        max_abs = max(float(np.max(np.abs(g))) for g in grads.values())
        if not np.isfinite(loss) or not np.isfinite(max_abs):
            raise DivergenceError(epoch, number, max_abs)
        clipped, _ = clip_global_norm(grads, self.hp.clip_norm)
        self.update_norms.append(global_norm(clipped))
        self.optimizer.step(self.model.params.tensors, clipped)
        return loss

    def train_epoch(self, entries: Sequence[ManifestEntry], epoch_seed: int, epoch: int) -> float:
        """One pass in seeded shuffle order; returns the mean batch loss."""
        if not entries:
            return 0.0
        order = np.random.default_rng(epoch_seed).permutation(len(entries))
        bs = self.hp.batch_size
        losses = []
        batch: List[Tuple[np.ndarray, List[int]]] = []
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            images = pool.map(self._load, [entries[int(i)].image_path for i in order])
            bar = tqdm(total=len(entries), desc=f"epoch {epoch}", disable=not self.progress, leave=False)
            for i, image in zip(order, images):
                batch.append((image, self.model.vocab.encode(entries[int(i)].transcript)))
                bar.update(1)
                if len(batch) == bs:
                    losses.append(self._update(batch, epoch, len(losses) + 1))
                    batch = []
            if batch:
                losses.append(self._update(batch, epoch, len(losses) + 1))
            bar.close()
        return float(np.mean(losses))

    def transcribe(self, entries: Sequence[ManifestEntry]) -> List[str]:
        return [self.model.greedy_decode(self._load(e.image_path), self.hp.max_decode_len).text for e in entries]

    def evaluate(self, valid: Sequence[ManifestEntry]) -> float:
        pairs = [
            EvalPair(target=e.transcript, hypothesis=text, sample_id=e.sample_id)
            for e, text in zip(valid, self.transcribe(valid))
        ]
        return crr(pairs, literal=self.literal_crr, include_separator=self.include_separator)

    def validation_loss(self, valid: Sequence[ManifestEntry]) -> float:
        """Mean teacher-forced loss over ``valid``; 0.0 when it is empty."""
        if not valid:
            return 0.0
        return float(np.mean([self.model.loss(self._load(e.image_path), self.model.vocab.encode(e.transcript))
                              for e in valid]))

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.model.params.tensors.items()}

    def restore(self, snapshot: Dict[str, np.ndarray]) -> None:
        self.model.params.tensors = {k: v.copy() for k, v in snapshot.items()}


@dataclass
class TrainResult:
    params: ModelParams
    log: List[EpochLog] = field(default_factory=list)
    stages: List[StageResult] = field(default_factory=list)


def train(
    manifests: Union[CurriculumManifest, Sequence[CurriculumManifest]],
    valid: Sequence[ManifestEntry],
    hp: Hyperparams,
    init: Optional[ModelParams] = None,
    stop: Optional[StopRule] = None,
    max_epochs: int = 100,
    root: Optional[PathLike] = None,
    progress: bool = False,
    on_epoch: Optional[Callable[[EpochLog], None]] = None,
) -> TrainResult:
    """
    Train on one manifest, or on a stage list run in order with warm starts.

    A stage that diverges ends at its best checkpoint instead of raising.

    Raises:
        UnknownTokenError: ``init``'s vocabulary misses a transcript symbol
    """
    if isinstance(manifests, CurriculumManifest):
        manifests = [manifests]
    texts = [e.transcript for m in manifests for e in m.entries] + [e.transcript for e in valid]
    if init is None:
        params = ModelParams.init(hp, Vocabulary.from_transcripts(texts))
    else:
        params = init.copy()
        missing = params.vocab.missing(texts)
        if missing:
            raise UnknownTokenError(f"vocabulary lacks {len(missing)} symbols: {''.join(missing[:20])!r}")
    model = Recognizer(params, max_side=hp.max_side)
    trainer = RecognizerTrainer(model, hp, root=root, progress=progress)
    stop = stop or StopRule()
    if len(manifests) == 1:
        results = [run_stage(trainer, manifests[0], valid, stop, max_epochs, hp.seed, on_epoch)]
    else:
        results = run_schedule(trainer, manifests, valid, stop, max_epochs, hp.seed, on_epoch)
    log = [entry for result in results for entry in result.history]
    return TrainResult(params=model.params, log=log, stages=results)


def grad_check(
    params: ModelParams,
    image: np.ndarray,
    transcript: str,
    step: float = 1e-5,
    grad_hook: Optional[Callable[[Dict[str, np.ndarray]], Dict[str, np.ndarray]]] = None,
) -> float:
    """
    Max relative error between analytic and central-difference gradients.

    ``grad_hook`` may rewrite the analytic gradients before comparison.
    """
    model = Recognizer(params.copy(), max_side=max(image.shape[:2]))
    ids = model.vocab.encode(transcript)
    _, analytic = model.loss_and_grads(image, ids)
    if grad_hook is not None:
        analytic = grad_hook(analytic)
    errors = finite_difference_check(lambda: model.loss(image, ids), model.params.tensors, analytic, step)
    for name in sorted(errors):
        logger.debug("grad check %-12s %.3e", name, errors[name])
    return max(errors.values())


def _min_preactivation(model: Recognizer, image: np.ndarray) -> float:
    """Smallest |pre-ReLU value| anywhere in the encoder."""
    t = model.params.tensors
    h = model._input(image)
    low = np.inf
    for i in (1, 2, 3):
        z, _ = conv2d_forward(h, t[f"enc.conv{i}.w"], t[f"enc.conv{i}.b"])
        low = min(low, float(np.abs(z).min()))
        h, _ = relu_forward(z)
    return low


def toy_problem(seed: int = 0) -> Tuple[ModelParams, np.ndarray, str]:
    """
    Tiny double-precision setup for gradient checks.

    Vocabulary of 5, 32x32 image (a 4x4 grid), D = 8, three decode steps.
    Draws are repeated until no encoder unit sits within ``KINK_MARGIN`` of
    the ReLU kink, so finite differences never straddle it.
    """
    hp = Hyperparams(conv_channels=(2, 3), feature_dim=4, pos_dims=4, embed_dim=4,
                     hidden_dim=4, attn_dim=4, max_side=32, seed=seed)
    params = ModelParams.init(hp, Vocabulary(["a"]))
    for attempt in range(1000):
        rng = np.random.default_rng([seed, 7, attempt])
        for name, value in params.tensors.items():
            params.tensors[name] = rng.normal(0.0, 0.5, size=value.shape)
        image = rng.integers(0, 256, size=(32, 32, 3)).astype(np.uint8)
        if _min_preactivation(Recognizer(params, max_side=32), image) >= KINK_MARGIN:
            break
    return params, image, "aa"


def save_params(path: PathLike, params: ModelParams, provenance: Optional[Dict[str, str]] = None) -> None:
    """``#kforge-ckpt v1``, a JSON metadata line, then little-endian float64 tensors in name order."""
    names = sorted(params.tensors)
    payload = b"".join(np.ascontiguousarray(params.tensors[n], dtype="<f8").tobytes() for n in names)
    meta = {
        "arch": params.arch,
        "vocab": params.vocab.symbols,
        "tensors": [[n, list(params.tensors[n].shape)] for n in names],
        "sha256": hashlib.sha256(payload).hexdigest(),
        "provenance": dict(provenance or {}),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(header_for("ckpt").encode("ascii") + b"\n")
        f.write(json.dumps(meta, sort_keys=True).encode("ascii") + b"\n")
        f.write(payload)


def load_params(path: PathLike, expected: Optional[Hyperparams] = None) -> ModelParams:
    """
    Raises:
        LoadError: missing file
        FormatVersionError: wrong header
        CorruptArtifactError: unreadable metadata, size or checksum mismatch
        ShapeError: a tensor does not fit the ``expected`` architecture
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise LoadError(f"{path}: cannot read checkpoint ({e})") from None
    header, _, rest = data.partition(b"\n")
    expected_header = header_for("ckpt")
    if header != expected_header.encode("ascii"):
        raise FormatVersionError(str(path), expected_header, header[:40].decode("ascii", "replace"))
    meta_line, _, payload = rest.partition(b"\n")
    try:
        meta = json.loads(meta_line.decode("ascii"))
        shapes = [(name, tuple(int(s) for s in shape)) for name, shape in meta["tensors"]]
        vocab = Vocabulary(meta["vocab"])
        arch = dict(meta["arch"])
        digest = meta["sha256"]
    except (ValueError, KeyError, TypeError) as e:
        raise CorruptArtifactError(f"{path}: unreadable checkpoint metadata ({e})") from None
    if hashlib.sha256(payload).hexdigest() != digest:
        raise CorruptArtifactError(f"{path}: checksum mismatch")
    sizes = [int(np.prod(shape)) for _, shape in shapes]
    if sum(sizes) * 8 != len(payload):
        raise CorruptArtifactError(f"{path}: payload holds {len(payload)} bytes, metadata needs {sum(sizes) * 8}")

    tensors, offset = {}, 0
    for (name, shape), size in zip(shapes, sizes):
        chunk = payload[offset:offset + size * 8]
        tensors[name] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape)
        offset += size * 8

    if expected is not None:
        want = param_shapes(arch_of(expected), len(vocab))
        for name, shape in sorted(want.items()):
            if name not in tensors:
                raise ShapeError(f"{path}: tensor '{name}' missing from checkpoint")
            if tensors[name].shape != shape:
                raise ShapeError(
                    f"{path}: tensor '{name}' has shape {tensors[name].shape}, configuration expects {shape}"
                )
        arch = arch_of(expected)
    return ModelParams(tensors=tensors, vocab=vocab, arch=arch)
