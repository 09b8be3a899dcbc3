import logging
import os

from fastapi import FastAPI
from fastapi.openapi.utils import get_openapi

from app.api.routes.predict import router as predict_router

logger = logging.getLogger(__name__)

SERVICE = "ast-toolkit"
VERSION = "0.1.0"

TAGS = [
    {"name": "inference", "description": "Score WAV clips and inspect patch geometry"},
    {"name": "health", "description": "Liveness and checkpoint status"},
]

app = FastAPI(
    title="AST Toolkit (Audio Spectrogram Transformer)",
    description="Attention-only audio classifier: scores WAV clips with a trained AST checkpoint and reports patch geometry",
    version=VERSION,
    openapi_tags=TAGS,
)

app.include_router(predict_router)


@app.get("/", tags=["health"])
def root():
    return {"service": SERVICE, "status": "running"}


@app.get("/health", tags=["health"])
def health():
    """`checkpoint` is the configured path; it is loaded lazily on the first /predict."""
    return {"status": "ok", "checkpoint": os.environ.get("AST_CHECKPOINT") or None}


def custom_openapi():
    if app.openapi_schema:
        return app.openapi_schema
    schema = get_openapi(
        title="AST Toolkit API",
        version=VERSION,
        description="Audio tagging inference with an Audio Spectrogram Transformer checkpoint",
        routes=app.routes,
        tags=TAGS,
    )
    app.openapi_schema = schema
    logger.debug(f"openapi schema built with {len(schema.get('paths', {}))} paths")
    return app.openapi_schema


app.openapi = custom_openapi
