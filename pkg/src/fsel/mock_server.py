"""Mock embedding service for testing the external provider end to end.

Implements the embedding-service contract over HTTP: POST ``/embed``
with ``{"images": [{"b64": <base64 PNG>}, ...]}`` answers 200 with
``{"dim": D, "embeddings": [[...], ...]}``, backed by the reference
encoder.  Fault injection modes exercise the client's validation and
retry paths:

* ``wrong-dim``   truncated vectors with a mismatched dim field
* ``nan``         a NaN planted in the first component
* ``malformed``   a 200 response that is not valid JSON
* ``error``       unconditional 500

``fail_first=N`` makes the first N requests return 500 and then
recover, for retry/backoff tests.

Run standalone with ``python -m fsel.mock_server --port 8900``.
"""

from __future__ import annotations

import argparse
import json
import threading
import time

import uvicorn
from fastapi import FastAPI, HTTPException
from fastapi.responses import Response
from pydantic import BaseModel

from .encoder import ReferenceEncoder, png_b64_to_image

FAULTS = ("wrong-dim", "nan", "malformed", "error")


class ImagePayload(BaseModel):
    b64: str


class EmbedRequest(BaseModel):
    images: list[ImagePayload]


def create_app(
    dim: int = 64,
    proj_seed: int = 0,
    fault: str | None = None,
    fail_first: int = 0,
) -> FastAPI:
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}, expected one of {FAULTS}")
    encoder = ReferenceEncoder(proj_seed=proj_seed, out_dim=dim)
    app = FastAPI(title="fsel mock embedding service")
    state = {"requests": 0}
    lock = threading.Lock()

    @app.post("/embed")
    def embed(request: EmbedRequest) -> Response:
        with lock:
            state["requests"] += 1
            count = state["requests"]
        if count <= fail_first:
            raise HTTPException(status_code=500, detail="simulated transient failure")
        if fault == "error":
            raise HTTPException(status_code=500, detail="simulated permanent failure")
        if fault == "malformed":
            return Response(content="{not json", media_type="application/json")
        if not request.images:
            raise HTTPException(status_code=400, detail="empty batch")
        embeddings = [
            encoder.encode_image(png_b64_to_image(img.b64)).values.tolist()
            for img in request.images
        ]
        payload: dict = {"dim": dim, "embeddings": embeddings}
        if fault == "wrong-dim":
            payload = {
                "dim": max(dim // 2, 1),
                "embeddings": [row[: max(dim // 2, 1)] for row in embeddings],
            }
        elif fault == "nan":
            payload["embeddings"][0][0] = float("nan")
        # stdlib dumps keeps NaN (allow_nan), which the client must reject
        return Response(content=json.dumps(payload), media_type="application/json")

    return app


class MockEmbedServer:
    """Run the mock service on a background thread; use as a context
    manager.  Binding port 0 picks a free port, exposed via ``url``."""

    def __init__(
        self,
        dim: int = 64,
        proj_seed: int = 0,
        fault: str | None = None,
        fail_first: int = 0,
        host: str = "127.0.0.1",
        port: int = 0,
    ):
        self.app = create_app(dim=dim, proj_seed=proj_seed, fault=fault, fail_first=fail_first)
        config = uvicorn.Config(self.app, host=host, port=port, log_level="error")
        self._server = uvicorn.Server(config)
        self._thread: threading.Thread | None = None
        self.host = host
        self.port = port

    def start(self, timeout: float = 10.0) -> "MockEmbedServer":
        self._thread = threading.Thread(target=self._server.run, daemon=True)
        self._thread.start()
        deadline = time.monotonic() + timeout
        while not self._server.started:
            if time.monotonic() > deadline:
                raise RuntimeError("mock embedding server failed to start")
            time.sleep(0.01)
        sockets = self._server.servers[0].sockets
        self.port = sockets[0].getsockname()[1]
        return self

    def stop(self) -> None:
        self._server.should_exit = True
        if self._thread is not None:
            self._thread.join(timeout=10.0)

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def __enter__(self) -> "MockEmbedServer":
        return self.start()

    def __exit__(self, *exc_info) -> None:
        self.stop()


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description="Run the mock embedding service")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8900)
    parser.add_argument("--dim", type=int, default=64)
    parser.add_argument("--proj-seed", type=int, default=0)
    parser.add_argument("--fault", choices=FAULTS, default=None)
    args = parser.parse_args(argv)
    app = create_app(dim=args.dim, proj_seed=args.proj_seed, fault=args.fault)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
