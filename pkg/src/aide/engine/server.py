"""Review HTTP service: the verification endpoints plus static UI assets.

Endpoints (JSON unless noted):

    GET  /api/runs/{run}/cases?state=pending   case summaries
    GET  /api/runs/{run}/review-stats          counts per state
    GET  /api/cases/{id}                       full case, with image URLs
    POST /api/cases/{id}/verdict               {verdict, corrections,
                                                expected_revision}
    GET  /api/images/{id}                      PNG bytes
    GET  /...                                  static assets (review UI)

Verdicts persist through the same atomic write path as stage artifacts;
optimistic concurrency maps RevisionConflict to HTTP 409. Concurrent
sessions are fine: mutations funnel through one process-wide lock plus the
per-case revision counter.
"""

from __future__ import annotations

import json
import mimetypes
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Optional

from ..core import BoundingBox, Detection
from ..errors import InvalidTransition, RevisionConflict
from ..verifier import CaseCorrection, load_case, load_cases, record_verdict, save_case
from ..worldsim import render_raster
from .runner import EngineRun

FALLBACK_PAGE = """<!doctype html>
<html><head><meta charset="utf-8"><title>AIDE review</title></head>
<body><h1>AIDE review service</h1>
<p>No UI assets are installed. Build the frontend (see frontend/README.md)
and pass its dist directory via <code>aide verify --serve ... --assets</code>,
or use the JSON API directly.</p></body></html>
"""


class ReviewServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address, run: EngineRun, assets_dir: Optional[Path] = None,
                 image_dir: Optional[Path] = None, token: Optional[str] = None):
        super().__init__(address, ReviewHandler)
        self.run = run
        self.assets_dir = Path(assets_dir) if assets_dir else None
        self.image_dir = Path(image_dir) if image_dir else None
        self.token = token
        self.mutation_lock = threading.Lock()


class ReviewHandler(BaseHTTPRequestHandler):
    server: ReviewServer
    protocol_version = "HTTP/1.1"

    def log_message(self, *args):  # quiet by default
        pass

    # ------------------------------------------------------------------
    # plumbing
    # ------------------------------------------------------------------

    def _send_json(self, status: int, payload) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _send_bytes(self, status: int, body: bytes, content_type: str) -> None:
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _error(self, status: int, code: str, message: str) -> None:
        self._send_json(status, {"error": code, "message": message})

    def _authorized(self) -> bool:
        if not self.server.token:
            return True
        return self.headers.get("Authorization") == f"Bearer {self.server.token}"

    def _read_json(self) -> dict:
        length = int(self.headers.get("Content-Length", 0))
        raw = self.rfile.read(length) if length else b""
        return json.loads(raw.decode("utf-8") or "{}")

    # ------------------------------------------------------------------
    # GET
    # ------------------------------------------------------------------

    def do_GET(self) -> None:
        path, _, query = self.path.partition("?")
        try:
            if path.startswith("/api/"):
                if not self._authorized():
                    return self._error(401, "unauthorized", "missing or bad bearer token")
                return self._api_get(path, query)
            return self._static(path)
        except BrokenPipeError:  # client went away
            pass
        except Exception as exc:  # surface, never hang the reviewer
            self._error(500, "internal", str(exc))

    def _api_get(self, path: str, query: str) -> None:
        parts = [p for p in path.split("/") if p]
        if len(parts) == 2 and parts[1] == "session":
            return self._send_json(200, {"run_id": self.server.run.manifest.run_id})
        if len(parts) == 4 and parts[1] == "runs" and parts[3] == "cases":
            return self._list_cases(parts[2], query)
        if len(parts) == 4 and parts[1] == "runs" and parts[3] == "review-stats":
            return self._review_stats(parts[2])
        if len(parts) == 3 and parts[1] == "cases":
            return self._get_case(parts[2])
        if len(parts) == 3 and parts[1] == "images":
            return self._get_image(parts[2])
        self._error(404, "not_found", path)

    def _check_run(self, run_id: str) -> bool:
        if run_id != self.server.run.manifest.run_id:
            self._error(404, "unknown_run", run_id)
            return False
        return True

    def _list_cases(self, run_id: str, query: str) -> None:
        if not self._check_run(run_id):
            return
        wanted = None
        for part in query.split("&"):
            if part.startswith("state="):
                wanted = part.removeprefix("state=")
        cases = self.server.run.cases()
        summaries = [
            {
                "id": c.id,
                "state": c.state,
                "revision": c.revision,
                "scenario": c.scenario.text,
                "category": c.scenario.category,
                "image_count": len(c.image_ids),
            }
            for c in cases.values()
            if wanted is None or c.state == wanted
        ]
        self._send_json(200, {"cases": summaries})

    def _review_stats(self, run_id: str) -> None:
        if not self._check_run(run_id):
            return
        counts = {"pending": 0, "passed": 0, "failed": 0, "total": 0}
        for case in self.server.run.cases().values():
            counts[case.state] += 1
            counts["total"] += 1
        self._send_json(200, counts)

    def _case_path(self, case_id: str) -> Path:
        return self.server.run.run_dir / "cases" / f"{case_id}.json"

    def _get_case(self, case_id: str) -> None:
        path = self._case_path(case_id)
        if not path.exists() or "/" in case_id or ".." in case_id:
            return self._error(404, "unknown_case", case_id)
        case = load_case(path)
        doc = case.to_dict()
        images = []
        for image_id in case.image_ids:
            entry = {"image_id": image_id, "url": f"/api/images/{image_id}"}
            record = self.server.run.image_record(image_id)
            if record is not None:
                # true pixel size: rasters may be served downscaled, but the
                # reviewer's boxes live in image coordinates
                entry["width"] = record.width
                entry["height"] = record.height
            images.append(entry)
        doc["images"] = images
        # corrections drawn in the UI default to the category under test
        doc["category_id"] = self.server.run.label_space.resolve(case.scenario.category)
        self._send_json(200, doc)

    def _get_image(self, image_id: str) -> None:
        if self.server.image_dir is not None:
            for ext in (".png", ".jpg", ".jpeg"):
                candidate = self.server.image_dir / f"{image_id}{ext}"
                if candidate.exists():
                    ctype = mimetypes.guess_type(candidate.name)[0] or "application/octet-stream"
                    return self._send_bytes(200, candidate.read_bytes(), ctype)
        try:
            png = render_raster(self.server.run.world, image_id)
        except Exception:
            return self._error(404, "unknown_image", image_id)
        self._send_bytes(200, png, "image/png")

    def _static(self, path: str) -> None:
        assets = self.server.assets_dir
        if path in ("/", "/index.html"):
            if assets and (assets / "index.html").exists():
                return self._send_bytes(
                    200, (assets / "index.html").read_bytes(), "text/html; charset=utf-8"
                )
            return self._send_bytes(200, FALLBACK_PAGE.encode(), "text/html; charset=utf-8")
        if assets:
            candidate = (assets / path.lstrip("/")).resolve()
            if candidate.is_file() and str(candidate).startswith(str(assets.resolve())):
                ctype = mimetypes.guess_type(candidate.name)[0] or "application/octet-stream"
                return self._send_bytes(200, candidate.read_bytes(), ctype)
        self._error(404, "not_found", path)

    # ------------------------------------------------------------------
    # POST
    # ------------------------------------------------------------------

    def do_POST(self) -> None:
        try:
            if not self._authorized():
                return self._error(401, "unauthorized", "missing or bad bearer token")
            parts = [p for p in self.path.split("?")[0].split("/") if p]
            if len(parts) == 4 and parts[1] == "cases" and parts[3] == "verdict":
                return self._post_verdict(parts[2])
            self._error(404, "not_found", self.path)
        except json.JSONDecodeError as exc:
            self._error(400, "bad_json", str(exc))
        except BrokenPipeError:
            pass
        except Exception as exc:
            self._error(500, "internal", str(exc))

    def _post_verdict(self, case_id: str) -> None:
        path = self._case_path(case_id)
        if not path.exists() or "/" in case_id or ".." in case_id:
            return self._error(404, "unknown_case", case_id)
        body = self._read_json()
        try:
            verdict = str(body["verdict"])
            expected_revision = int(body["expected_revision"])
            corrections = [
                CaseCorrection(
                    image_id=str(c["image_id"]),
                    detection=Detection(
                        box=BoundingBox.from_dict(c["box"]),
                        category=int(c["category"]),
                        score=1.0,
                    ),
                )
                for c in body.get("corrections", [])
            ]
        except (KeyError, TypeError, ValueError) as exc:
            return self._error(400, "bad_request", f"malformed verdict body: {exc}")
        with self.server.mutation_lock:
            case = load_case(path)
            try:
                updated = record_verdict(case, verdict, corrections, expected_revision)
            except RevisionConflict as exc:
                return self._error(409, "revision_conflict", str(exc))
            except InvalidTransition as exc:
                return self._error(409, "invalid_transition", str(exc))
            except ValueError as exc:
                return self._error(400, "bad_request", str(exc))
            save_case(updated, path.parent)
        self._send_json(200, updated.to_dict())


def serve_run(
    run: EngineRun,
    address: tuple[str, int] = ("127.0.0.1", 0),
    assets_dir: Optional[str | Path] = None,
    image_dir: Optional[str | Path] = None,
    token: Optional[str] = None,
) -> ReviewServer:
    """Construct the server (bound but not serving). Callers run
    ``serve_forever`` themselves or drive it from a thread in tests."""
    return ReviewServer(address, run, assets_dir=assets_dir, image_dir=image_dir, token=token)
