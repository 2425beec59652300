"""HTTP inference service: health, query-driven segmentation, and the raw
proposal view. The checkpoint is loaded once and never mutated; every
response is a deterministic function of (checkpoint, request) apart from the
timing field.
"""

from __future__ import annotations

import base64
import binascii
import io
import time
from pathlib import Path
from typing import Literal

import numpy as np
from fastapi import FastAPI, Query, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import FileResponse, JSONResponse
from fastapi.staticfiles import StaticFiles
from PIL import Image
from pydantic import BaseModel, Field

from . import inference
from .checkpoint import checkpoint_model_id, load_model
from .data import encode_rle
from .evaluation import SegmentationEngine
from .text import CategoryQueries

DEFAULT_MAX_PIXELS = 4 * 1024 * 1024


class ApiError(Exception):
    def __init__(self, status_code: int, detail: str):
        self.status_code = status_code
        self.detail = detail


class RlePayload(BaseModel):
    size: list[int]
    counts: list[int]


class QuerySpec(BaseModel):
    category: str = Field(min_length=1)
    phrases: list[str] | None = None


class SegmentOptions(BaseModel):
    use_background_rule: bool = False
    fg_categories: list[str] | None = None
    background_category: str = "background"
    phrase_mode: Literal["word", "mean"] = "word"
    mask_threshold: float = 0.5


class SegmentRequest(BaseModel):
    image: str = Field(min_length=1, description="base64-encoded PNG")
    queries: list[QuerySpec] = Field(min_length=1)
    options: SegmentOptions = SegmentOptions()


class LabelMapEntry(BaseModel):
    category: str
    mask: RlePayload


class PerQueryMask(BaseModel):
    phrase: str
    category: str
    mask: RlePayload
    score: float


class SegmentResponse(BaseModel):
    model_id: str
    mask_size: list[int]
    padding: list[int]
    label_map: list[LabelMapEntry]
    per_query: list[PerQueryMask]
    timing_ms: float


class ProposalInfo(BaseModel):
    index: int
    mask: RlePayload
    best_phrase: str | None = None
    best_category: str | None = None
    score: float | None = None


class ProposalsResponse(BaseModel):
    model_id: str
    mask_size: list[int]
    padding: list[int]
    proposals: list[ProposalInfo]
    timing_ms: float


class HealthResponse(BaseModel):
    status: str
    model_id: str


def _rle_payload(mask: np.ndarray) -> RlePayload:
    rle = encode_rle(mask.astype(np.uint8))
    return RlePayload(size=list(rle.size), counts=list(rle.counts))


def _decode_image(b64: str, *, max_pixels: int, strict_size: bool
                  ) -> tuple[np.ndarray, tuple[int, int]]:
    """base64 PNG -> float image in [0,1], padded up to multiples of 32.

    Returns (image, (pad_h, pad_w)). Reflect padding, falling back to edge
    padding for images smaller than the pad width.
    """
    try:
        raw = base64.b64decode(b64, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise ApiError(400, f"body.image: invalid base64 ({exc})") from exc
    try:
        with Image.open(io.BytesIO(raw)) as img:
            rgb = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except Exception as exc:
        raise ApiError(400, f"body.image: cannot decode PNG ({exc})") from exc
    h, w = rgb.shape[:2]
    if h * w > max_pixels:
        raise ApiError(413, f"image has {h * w} pixels; the cap is {max_pixels}")
    pad_h = (-h) % 32
    pad_w = (-w) % 32
    if (pad_h or pad_w) and strict_size:
        raise ApiError(422, f"image size {h}x{w} is not divisible by 32")
    if pad_h or pad_w:
        mode = "reflect" if pad_h < h and pad_w < w else "edge"
        rgb = np.pad(rgb, ((0, pad_h), (0, pad_w), (0, 0)), mode=mode)
    return rgb, (pad_h, pad_w)


def run_segment_request(model, embedder, model_id: str,
                        request: SegmentRequest, *,
                        max_pixels: int = DEFAULT_MAX_PIXELS,
                        strict_size: bool = False) -> SegmentResponse:
    """Full /v1/segment semantics; shared by the service and the local CLI."""
    started = time.perf_counter()
    opts = request.options
    image, padding = _decode_image(request.image, max_pixels=max_pixels,
                                   strict_size=strict_size)
    queries = CategoryQueries(tuple(
        (q.category, tuple(q.phrases) if q.phrases else (q.category,))
        for q in request.queries))
    engine = SegmentationEngine(model, embedder, phrase_mode=opts.phrase_mode)
    out = engine.forward_images([image])
    masks, feats = out["masks"][0], out["features"][0]
    rows, row_cats, row_phrases = engine.query_rows(queries)
    num_cats = len(queries.categories)
    rl = inference.region_logits(rows, feats)
    y_rows = inference.pixel_logits(rl, masks)
    y = inference.ensemble_reduce(y_rows, row_cats, num_cats)
    label_map = inference.predict(y)
    names = queries.names
    if opts.use_background_rule:
        if opts.background_category not in names:
            raise ApiError(400, "options.background_category: the background "
                                "rule needs that category in the request")
        fg_names = opts.fg_categories if opts.fg_categories is not None else []
        unknown = [n for n in fg_names if n not in names]
        if unknown:
            raise ApiError(400, f"options.fg_categories: unknown categories {unknown}")
        label_map = inference.apply_background_rule(
            label_map, [names.index(n) for n in fg_names], num_cats,
            names.index(opts.background_category))

    soft = inference.query_soft_masks(rl, masks, engine.tau)
    per_query: list[PerQueryMask] = []
    row_scores = rl.max(axis=1)
    seen: dict[tuple[int, str], list[int]] = {}
    for row, key in enumerate(row_phrases):
        seen.setdefault(key, []).append(row)
    for (cat_idx, phrase), row_ids in seen.items():
        blended = soft[row_ids].max(axis=0)
        per_query.append(PerQueryMask(
            phrase=phrase, category=names[cat_idx],
            mask=_rle_payload(blended >= opts.mask_threshold),
            score=float(row_scores[row_ids].max())))

    entries = [LabelMapEntry(category=name, mask=_rle_payload(label_map == k))
               for k, name in enumerate(names)]
    return SegmentResponse(
        model_id=model_id,
        mask_size=list(label_map.shape),
        padding=list(padding),
        label_map=entries,
        per_query=per_query,
        timing_ms=(time.perf_counter() - started) * 1000.0)


def create_app(checkpoint_path: str | Path, *,
               max_pixels: int = DEFAULT_MAX_PIXELS,
               strict_size: bool = False,
               static_dir: str | Path | None = None) -> FastAPI:
    model, embedder, _, _ = load_model(checkpoint_path)
    model_id = checkpoint_model_id(checkpoint_path)
    app = FastAPI(title="maskground inference service")
    app.state.model_id = model_id

    @app.exception_handler(ApiError)
    async def _api_error(_, exc: ApiError):
        return JSONResponse(status_code=exc.status_code,
                            content={"detail": exc.detail})

    @app.exception_handler(RequestValidationError)
    async def _validation_error(_: Request, exc: RequestValidationError):
        paths = [".".join(str(p) for p in e["loc"]) + ": " + e["msg"]
                 for e in exc.errors()]
        return JSONResponse(status_code=400, content={"detail": "; ".join(paths)})

    def _engine(mode: str) -> SegmentationEngine:
        return SegmentationEngine(model, embedder, phrase_mode=mode)

    @app.get("/v1/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", model_id=model_id)

    @app.post("/v1/segment", response_model=SegmentResponse)
    def segment(request: SegmentRequest) -> SegmentResponse:
        return run_segment_request(model, embedder, model_id, request,
                                   max_pixels=max_pixels,
                                   strict_size=strict_size)

    @app.get("/v1/proposals", response_model=ProposalsResponse)
    def proposals(image: str = Query(min_length=1),
                  queries: str | None = Query(default=None),
                  threshold: float = Query(default=0.5, gt=0.0, lt=1.0),
                  phrase_mode: Literal["word", "mean"] = Query(default="word")
                  ) -> ProposalsResponse:
        started = time.perf_counter()
        decoded, padding = _decode_image(image, max_pixels=max_pixels,
                                         strict_size=strict_size)
        engine = _engine(phrase_mode)
        out = engine.forward_images([decoded])
        masks, feats = out["masks"][0], out["features"][0]
        best_phrase: list[str | None] = [None] * masks.shape[0]
        best_category: list[str | None] = [None] * masks.shape[0]
        scores: list[float | None] = [None] * masks.shape[0]
        if queries:
            names = [q.strip() for q in queries.split(",") if q.strip()]
            if not names:
                raise ApiError(400, "query.queries: no usable category names")
            cat_queries = CategoryQueries.single_phrase(names)
            rows, row_cats, row_phrases = engine.query_rows(cat_queries)
            best_rows, row_best = inference.classify_proposals(masks, feats, rows)
            for n in range(masks.shape[0]):
                cat_idx, phrase = row_phrases[best_rows[n]]
                best_phrase[n] = phrase
                best_category[n] = cat_queries.names[cat_idx]
                scores[n] = float(row_best[n])
        infos = [ProposalInfo(index=n, mask=_rle_payload(masks[n] >= threshold),
                              best_phrase=best_phrase[n],
                              best_category=best_category[n], score=scores[n])
                 for n in range(masks.shape[0])]
        return ProposalsResponse(model_id=model_id,
                                 mask_size=list(masks.shape[1:]),
                                 padding=list(padding), proposals=infos,
                                 timing_ms=(time.perf_counter() - started) * 1000.0)

    if static_dir is not None:
        static_dir = Path(static_dir)

        @app.get("/")
        def index() -> FileResponse:
            return FileResponse(static_dir / "index.html")

        app.mount("/static", StaticFiles(directory=static_dir), name="static")

    return app
