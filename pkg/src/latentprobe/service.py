"""HTTP front of the labeling session: task handout, votes, dispositions.

Endpoints:
  GET  /api/task?judge=ID   -> {image_id, stage, label_name, image_url,
                                pair_url} or null when the judge is done
  POST /api/vote            -> {accepted, duplicate}
  GET  /api/dispositions    -> [{image_id, outcome, ...}]
  GET  /images/{id}/{stage}.png

The perturbed image of a pair is addressed by ``pair_url`` on
unperturbed-stage tasks so the interface can reveal it locally the moment
the judge keeps the unperturbed image.
"""

from __future__ import annotations

from pathlib import Path

from fastapi import FastAPI, HTTPException, Query
from fastapi.responses import FileResponse, HTMLResponse
from pydantic import BaseModel, Field

from .labeling import (
    STAGE_PERTURBED,
    STAGE_UNPERTURBED,
    LabelingSession,
    VoteError,
    VoteRecord,
)


class VoteBody(BaseModel):
    judge: str = Field(min_length=1)
    image_id: int
    stage: str
    choice: int


def _image_url(image_id: int, stage: str) -> str:
    return f"/images/{image_id}/{stage}.png"


def create_app(
    session: LabelingSession,
    images_dir: str | Path,
    ui_dir: str | Path | None = None,
) -> FastAPI:
    """Wire a session and a directory of ``<id>_<stage>.png`` files."""
    images_dir = Path(images_dir)
    app = FastAPI(title="latentprobe labeling service")

    @app.get("/api/task")
    def get_task(judge: str = Query(min_length=1)):
        try:
            task = session.next_task(judge)
        except VoteError as exc:
            raise HTTPException(status_code=403, detail=str(exc))
        if task is None:
            return None
        image_id, stage = task["image_id"], task["stage"]
        other = STAGE_PERTURBED if stage == STAGE_UNPERTURBED else STAGE_UNPERTURBED
        return {
            "image_id": image_id,
            "stage": stage,
            "label_name": task["label_name"],
            "image_url": _image_url(image_id, stage),
            "pair_url": _image_url(image_id, other),
        }

    @app.post("/api/vote")
    def post_vote(body: VoteBody):
        vote = VoteRecord(
            judge_id=body.judge,
            image_id=body.image_id,
            stage=body.stage,
            choice=body.choice,
            timestamp=session.clock(),
        )
        try:
            return session.submit_vote(vote)
        except VoteError as exc:
            raise HTTPException(status_code=400, detail=str(exc))

    @app.get("/api/dispositions")
    def get_dispositions():
        return [d.to_json() for d in session.dispositions()]

    @app.get("/images/{image_id}/{stage}.png")
    def get_image(image_id: int, stage: str):
        if stage not in (STAGE_UNPERTURBED, STAGE_PERTURBED):
            raise HTTPException(status_code=404, detail="unknown stage")
        path = images_dir / f"{image_id}_{stage}.png"
        if not path.exists():
            raise HTTPException(status_code=404, detail="no such image")
        return FileResponse(path, media_type="image/png")

    if ui_dir is not None:
        ui_index = Path(ui_dir) / "index.html"

        @app.get("/", response_class=HTMLResponse)
        def index():
            if not ui_index.exists():
                raise HTTPException(status_code=404, detail="UI not built")
            return ui_index.read_text()

        @app.get("/ui/{name}")
        def ui_asset(name: str):
            path = Path(ui_dir) / name
            if not path.is_file() or "/" in name or name.startswith("."):
                raise HTTPException(status_code=404, detail="no such asset")
            return FileResponse(path)

    return app
