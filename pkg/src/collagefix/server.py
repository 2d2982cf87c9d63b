"""Local HTTP service exposing session setup, user edits, and model fixups.

Single process: model parameters are loaded once and shared read-only; a
bounded worker pool runs sampling jobs; the session/job stores are guarded by
one lock (all critical sections are short). Images travel as PNG bodies,
everything else as JSON.
"""

from __future__ import annotations

import itertools
import subprocess
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, File, Request, Response, UploadFile
from fastapi.responses import JSONResponse
from scipy import ndimage

from . import __version__
from . import io as cfio
from .core import BinaryMask, DepthMap, RasterImage, SegmentMap
from .diffusion.model import DualDenoiser, checkpoint_hash, load_checkpoint
from .diffusion.sampling import ddim_sample, sdedit_sample
from .motion import UserOp, apply_user_edit

SCHEMA_VERSION = 1
DEFAULT_PORT = 8787
JOB_STATES = ("queued", "running", "done", "failed")


@dataclass
class Session:
    id: str
    reference: RasterImage
    segments: SegmentMap
    depth: DepthMap | None
    edit: object | None = None  # pending EditPackage
    edit_ops: list = field(default_factory=list)
    generation: int = 0  # bumped when the reference is rebound


@dataclass
class FixupJob:
    id: str
    session_id: str
    state: str = "queued"
    error: str | None = None
    result: RasterImage | None = None
    timings_ms: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    def advance(self, state: str) -> None:
        if JOB_STATES.index(state) <= JOB_STATES.index(self.state):
            raise RuntimeError(f"job {self.id}: cannot move {self.state} -> {state}")
        self.state = state


def fallback_segmenter(image: RasterImage, levels: int = 5,
                       min_area_frac: float = 0.002) -> SegmentMap:
    """Color-quantized connected components, for demo sessions without an
    uploaded segment map. Components below the area floor stay background."""
    quant = np.minimum((image.data * levels).astype(np.int32), levels - 1)
    color_id = quant[..., 0]
    for c in range(1, image.channels):
        color_id = color_id * levels + quant[..., c]
    min_area = max(int(min_area_frac * image.height * image.width), 4)
    components = []
    for cid in np.unique(color_id):
        lab, n = ndimage.label(color_id == cid)
        for i in range(1, n + 1):
            comp = lab == i
            area = int(comp.sum())
            if area >= min_area:
                components.append((area, comp))
    components.sort(key=lambda t: -t[0])
    labels = np.zeros((image.height, image.width), dtype=np.int32)
    for k, (_, comp) in enumerate(components[1:] if len(components) > 1 else [], start=1):
        labels[comp] = k  # largest component is treated as background
    return SegmentMap(labels)


def _segment_inventory(session: Session) -> list[dict]:
    inv = []
    for k in range(1, session.segments.num_segments + 1):
        foot = session.segments.footprint(k)
        ys, xs = np.nonzero(foot)
        if len(xs) == 0:
            inv.append({"label": k, "area": 0, "bbox": None, "mean_depth": None})
            continue
        mean_depth = (float(session.depth.depth[foot].mean())
                      if session.depth is not None else None)
        inv.append({"label": k, "area": int(len(xs)),
                    "bbox": [int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())],
                    "mean_depth": mean_depth})
    return inv


def _decode_labels(blob: bytes) -> np.ndarray:
    if blob[:4] == cfio.MFXT_MAGIC:
        arr = cfio.decode_tensor_bytes(blob)
        return np.round(arr[..., 0]).astype(np.int32)
    import cv2
    raw = cv2.imdecode(np.frombuffer(blob, dtype=np.uint8), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise cfio.FileFormatError("cannot decode segment map")
    if raw.ndim == 3:
        raw = raw[..., 0]
    return raw.astype(np.int32)


def _decode_depth(blob: bytes) -> np.ndarray:
    if blob[:4] == cfio.MFXT_MAGIC:
        return cfio.decode_tensor_bytes(blob)[..., 0]
    # normalized PNG depth: map [0,1] to [1, 10]
    img = cfio.decode_png_bytes(blob)
    return 1.0 + 9.0 * img.data[..., 0]


def _git_hash() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"],
                             capture_output=True, text=True, timeout=2)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return f"v{__version__}"


SCHEMAS = {
    "version": SCHEMA_VERSION,
    "edit_request": {
        "type": "object",
        "properties": {"ops": {"type": "array", "items": {
            "type": "object",
            "properties": {"label": {"type": "integer", "minimum": 1},
                           "kind": {"enum": ["transform", "delete", "duplicate"]},
                           "transform": {"type": "object",
                                         "properties": {k: {"type": "number"} for k in
                                                        ("a11", "a12", "a21", "a22", "tx", "ty")}},
                           "z_hint": {"type": ["integer", "null"]}},
            "required": ["label", "kind"]}}},
        "required": ["ops"],
    },
    "fixup_request": {
        "type": "object",
        "properties": {"mode": {"enum": ["fixup", "sdedit"]},
                       "steps": {"type": "integer", "minimum": 1},
                       "seed": {"type": "integer"},
                       "strength": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                       "use_output_as_reference": {"type": "boolean"}},
    },
    "job": {
        "type": "object",
        "properties": {"id": {"type": "string"}, "state": {"enum": list(JOB_STATES)},
                       "error": {"type": ["string", "null"]},
                       "timings_ms": {"type": "object"},
                       "result_url": {"type": ["string", "null"]}},
        "required": ["id", "state"],
    },
}


def create_app(model: DualDenoiser | None = None, checkpoint: str | None = None,
               workers: int = 2, default_steps: int = 50) -> FastAPI:
    app = FastAPI(title="collagefix edit server")
    lock = threading.RLock()
    sessions: dict[str, Session] = {}
    jobs: dict[str, FixupJob] = {}
    pool = ThreadPoolExecutor(max_workers=workers)
    counter = itertools.count(1)

    ck_hash = "none"
    if checkpoint is not None:
        model, _ = load_checkpoint(checkpoint)
        ck_hash = checkpoint_hash(checkpoint)
    if model is None:
        raise ValueError("edit server needs a model or a checkpoint path")
    model.eval()
    build = _git_hash()

    def error(status: int, message: str, **extra):
        return JSONResponse(status_code=status, content={"error": message, **extra})

    @app.get("/health")
    def health():
        return {"status": "ok", "build_hash": build, "checkpoint_hash": ck_hash,
                "model_resolution": model.config.resolution}

    @app.get("/schema")
    def schema():
        return SCHEMAS

    @app.post("/session")
    async def create_session(image: UploadFile = File(...),
                             segments: UploadFile | None = File(None),
                             depth: UploadFile | None = File(None)):
        try:
            ref = cfio.decode_png_bytes(await image.read())
        except cfio.FileFormatError as e:
            return error(415, f"image: {e}")
        if segments is not None:
            try:
                labels = _decode_labels(await segments.read())
            except cfio.FileFormatError as e:
                return error(415, f"segments: {e}")
            if labels.shape != (ref.height, ref.width):
                return error(400, "segment map dimensions do not match image",
                             image_shape=[ref.height, ref.width],
                             segments_shape=list(labels.shape))
            try:
                seg = SegmentMap(labels)
            except ValueError as e:
                return error(400, f"segments: {e}")
        else:
            seg = fallback_segmenter(ref)
        dep = None
        if depth is not None:
            try:
                depth_arr = _decode_depth(await depth.read())
            except cfio.FileFormatError as e:
                return error(415, f"depth: {e}")
            if depth_arr.shape != (ref.height, ref.width):
                return error(400, "depth map dimensions do not match image",
                             image_shape=[ref.height, ref.width],
                             depth_shape=list(depth_arr.shape))
            dep = DepthMap(depth_arr)
        sid = uuid.uuid4().hex[:12]
        session = Session(id=sid, reference=ref, segments=seg, depth=dep)
        with lock:
            sessions[sid] = session
        return {"session_id": sid, "width": ref.width, "height": ref.height,
                "segments": _segment_inventory(session)}

    def get_session(sid: str) -> Session | None:
        with lock:
            return sessions.get(sid)

    @app.get("/session/{sid}/reference.png")
    def session_reference(sid: str):
        session = get_session(sid)
        if session is None:
            return error(404, "unknown session")
        return Response(cfio.encode_png_bytes(session.reference, bitdepth=8),
                        media_type="image/png")

    @app.get("/session/{sid}/segments.mfxt")
    def session_segments(sid: str):
        session = get_session(sid)
        if session is None:
            return error(404, "unknown session")
        data = session.segments.labels.astype(np.float32)
        return Response(cfio.encode_tensor_bytes(data),
                        media_type="application/octet-stream")

    @app.post("/session/{sid}/edit")
    async def post_edit(sid: str, request: Request):
        session = get_session(sid)
        if session is None:
            return error(404, "unknown session")
        body = await request.json()
        try:
            ops = [UserOp.from_dict(d) for d in body.get("ops", [])]
        except (KeyError, TypeError, ValueError) as e:
            return error(422, f"invalid op: {e}")
        try:
            package = apply_user_edit(session.reference, session.segments, ops,
                                      session.depth)
        except ValueError as e:
            return error(422, f"invalid op: {e}")
        with lock:
            session.edit = package
            session.edit_ops = [op.to_dict() for op in ops]
        return {"hole_fraction": package.mask.hole_fraction(),
                "new_labels": package.meta.get("new_labels", []),
                "preview_url": f"/session/{sid}/preview.png",
                "mask_url": f"/session/{sid}/mask.png"}

    @app.get("/session/{sid}/preview.png")
    def preview(sid: str):
        session = get_session(sid)
        if session is None:
            return error(404, "unknown session")
        package = session.edit
        if package is None:
            return error(409, "no edit in session")
        return Response(cfio.encode_png_bytes(package.coarse, bitdepth=8),
                        media_type="image/png")

    @app.get("/session/{sid}/mask.png")
    def mask_png(sid: str):
        session = get_session(sid)
        if session is None:
            return error(404, "unknown session")
        package = session.edit
        if package is None:
            return error(409, "no edit in session")
        mask_img = RasterImage(package.mask.bits.astype(np.float32))
        return Response(cfio.encode_png_bytes(mask_img, bitdepth=8),
                        media_type="image/png")

    def run_job(job: FixupJob, session: Session, package) -> None:
        queued_at = job.params.pop("_queued_at")
        with lock:
            job.advance("running")
            job.timings_ms["queued"] = (time.time() - queued_at) * 1e3
        t0 = time.time()
        try:
            steps = int(job.params.get("steps", default_steps))
            seed = int(job.params.get("seed", 0))
            mode = job.params.get("mode", "fixup")
            if mode == "sdedit":
                out = sdedit_sample(model, package.coarse,
                                    strength=float(job.params.get("strength", 0.4)),
                                    steps=steps, seed=seed, mask=package.mask)
            elif mode == "fixup":
                out = ddim_sample(model, package.reference, package.coarse,
                                  package.mask, steps=steps, seed=seed)
            else:
                raise ValueError(f"unknown mode {mode!r}")
            with lock:
                job.result = out
                job.timings_ms["sample"] = (time.time() - t0) * 1e3
                job.advance("done")
                if job.params.get("use_output_as_reference"):
                    session.reference = out
                    session.edit = None
                    session.generation += 1
        except Exception as e:  # a crashed job must end failed, never hang
            with lock:
                job.error = f"{type(e).__name__}: {e}"
                job.timings_ms["sample"] = (time.time() - t0) * 1e3
                if job.state != "failed":
                    job.advance("failed")

    @app.post("/session/{sid}/fixup")
    async def post_fixup(sid: str, request: Request):
        session = get_session(sid)
        if session is None:
            return error(404, "unknown session")
        with lock:
            package = session.edit
        if package is None:
            return error(409, "no edit in session; POST /session/{id}/edit first")
        params = {}
        if await request.body():
            params = await request.json()
        params["_queued_at"] = time.time()
        job = FixupJob(id=f"job{next(counter):06d}-{uuid.uuid4().hex[:6]}",
                       session_id=sid, params=params)
        with lock:
            jobs[job.id] = job
        pool.submit(run_job, job, session, package)
        return {"job_id": job.id, "status_url": f"/job/{job.id}"}

    @app.get("/job/{jid}")
    def job_status(jid: str):
        with lock:
            job = jobs.get(jid)
            if job is None:
                return error(404, "unknown job")
            return {"id": job.id, "state": job.state, "error": job.error,
                    "timings_ms": {k: round(v, 1) for k, v in job.timings_ms.items()},
                    "result_url": f"/job/{job.id}/result.png" if job.state == "done" else None}

    @app.get("/job/{jid}/result.png")
    def job_result(jid: str):
        with lock:
            job = jobs.get(jid)
        if job is None:
            return error(404, "unknown job")
        if job.state != "done" or job.result is None:
            return error(409, f"job is {job.state}")
        return Response(cfio.encode_png_bytes(job.result, bitdepth=8),
                        media_type="image/png")

    return app
