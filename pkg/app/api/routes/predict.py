import io
import os
from functools import lru_cache
from typing import Optional

from fastapi import APIRouter, Depends, File, HTTPException, Query, UploadFile

from app.core.errors import ASTError, GeometryError, InputError
from app.core.frontend import SAMPLE_RATE, read_wav
from app.core.inference import LoadedModel
from app.core.patchify import patch_counts
from app.core.schemas import GeometryResponse, PatchGrid, PredictResponse

router = APIRouter(tags=["inference"])

WAV_TYPES = {"audio/wav", "audio/x-wav", "audio/wave", "audio/vnd.wave"}


@lru_cache(maxsize=4)
def _load(path: str) -> LoadedModel:
    return LoadedModel.from_path(path)


def get_model() -> Optional[LoadedModel]:
    """Model named by the AST_CHECKPOINT environment variable, loaded once per path."""
    path = os.environ.get("AST_CHECKPOINT")
    if not path:
        return None
    try:
        return _load(path)
    except ASTError as e:
        raise HTTPException(status_code=503, detail=f"Checkpoint could not be loaded: {e}")


@router.post(
    "/predict",
    response_model=PredictResponse,
    summary="Score an audio clip",
    description="Upload a mono 16 kHz PCM16 WAV file and receive per-class scores from the configured AST checkpoint.",
    responses={
        200: {
            "description": "Scores sorted from highest to lowest",
            "content": {
                "application/json": {
                    "example": {
                        "scores": [
                            {"label_id": "c00", "name": "tone_300hz", "score": 0.93},
                            {"label_id": "c01", "name": "burst_814hz", "score": 0.04},
                        ],
                        "top_label": "c00",
                        "multi_label": True,
                        "frames": 1024,
                    }
                }
            },
        },
        400: {"description": "Empty file uploaded"},
        415: {"description": "Unsupported file format"},
        422: {"description": "Audio could not be decoded or is not mono 16 kHz"},
        503: {"description": "No checkpoint configured"},
    },
)
async def predict(
    file: UploadFile = File(..., description="WAV file (PCM16, mono, 16 kHz)"),
    top_k: Optional[int] = Query(None, ge=1, description="Return only the k best classes"),
    model: Optional[LoadedModel] = Depends(get_model),
):
    """
    Score one clip.

    The clip is converted to a log-Mel spectrogram, padded or cut to the
    checkpoint's frame count and normalised with the statistics stored in
    the checkpoint.
    """
    if model is None:
        raise HTTPException(status_code=503, detail="No model configured; set AST_CHECKPOINT.")
    raw = await file.read()
    if not raw:
        raise HTTPException(status_code=400, detail="Empty file uploaded.")

    filename = (file.filename or "").lower()
    content_type = (file.content_type or "").lower()
    if not (filename.endswith(".wav") or content_type in WAV_TYPES):
        raise HTTPException(status_code=415, detail=f"Unsupported content type: {file.content_type}")

    try:
        wave = read_wav(io.BytesIO(raw), expected_rate=SAMPLE_RATE)
        return model.predict(wave, top_k=top_k)
    except InputError as e:
        raise HTTPException(status_code=422, detail=str(e))


@router.get(
    "/geometry",
    response_model=GeometryResponse,
    summary="Patch counts for a spectrogram",
    description="Number of patches along frequency and time for a spectrogram extent and patch/stride choice.",
    responses={422: {"description": "Patch larger than the spectrogram or invalid stride"}},
)
def geometry(
    mels: int = Query(128, ge=1),
    frames: int = Query(1024, ge=1),
    patch_f: int = Query(16, ge=1),
    patch_t: int = Query(16, ge=1),
    stride_f: int = Query(10, ge=1),
    stride_t: int = Query(10, ge=1),
):
    if stride_f > patch_f or stride_t > patch_t:
        raise HTTPException(status_code=422, detail="stride must not exceed the patch extent")
    grid = PatchGrid(patch_f=patch_f, patch_t=patch_t, stride_f=stride_f, stride_t=stride_t)
    try:
        n_f, n_t = patch_counts(mels, frames, grid)
    except GeometryError as e:
        raise HTTPException(status_code=422, detail=str(e))
    return GeometryResponse(n_f=n_f, n_t=n_t, num_patches=n_f * n_t, overlap=grid.overlap)
