"""HTTP chat service hosting live seeker sessions against one checkpoint.

The checkpoint's weights are immutable and shared across sessions; each
session owns its append-only history under a lock. Live users type titles
rather than item ids, so every message is scanned for catalog titles
(case-insensitive, longest match first) as well as the ``@id`` convention.
"""

from __future__ import annotations

import json
import logging
import threading
import time
import uuid
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, Field

from ..corpus import REC_MARK, SEEKER_MARK, tokenize
from ..kg import EntityLinker
from ..model import NtrdModel
from ..training import rebuild_from_checkpoint

log = logging.getLogger("ntrd.service")

MAX_MESSAGE_CHARS = 1000


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str):
        self.status = status
        self.code = code
        self.message = message


class MessageRequest(BaseModel):
    text: str


class ItemCard(BaseModel):
    id: int
    title: str
    probability: float


class SlotCandidates(BaseModel):
    position: int
    items: list[ItemCard]


class ChatResponse(BaseModel):
    session_id: str
    response: str
    template: str
    items: list[ItemCard]
    slot_candidates: list[SlotCandidates]


class SessionInfo(BaseModel):
    session_id: str
    created: float
    last_active: float
    turns: list[dict]


class CreateSessionResponse(BaseModel):
    session_id: str


class Session:
    def __init__(self):
        self.id = uuid.uuid4().hex
        self.created = time.time()
        self.last_active = self.created
        self.turns: list[dict] = []   # {role, text, items}
        self.lock = threading.Lock()


class ChatService:
    """Inference wrapper shared by every session."""

    def __init__(self, model: NtrdModel, top_k_shown: int = 5):
        self.model = model
        self.top_k_shown = top_k_shown
        self.linker = EntityLinker(model.recommender.kg, list(model.catalog))
        # longest titles first so overlapping names resolve to the long match
        self.titles = sorted(((title.lower(), item)
                              for item, title in model.catalog.items()),
                             key=lambda kv: -len(kv[0]))

    def scan_items(self, text: str) -> list[int]:
        found: list[int] = []
        lowered = " ".join(tokenize(text))
        for title, item in self.titles:
            canon = " ".join(tokenize(title))
            if canon and canon in lowered and item not in found:
                found.append(item)
        for tok in tokenize(text):
            if tok.startswith("@") and tok[1:].isdigit():
                item = int(tok[1:])
                if item in self.model.catalog and item not in found:
                    found.append(item)
        return found

    def respond(self, session: Session, text: str) -> ChatResponse:
        vocab = self.model.vocab
        context_ids: list[int] = []
        mention_tokens: list[str] = []
        item_mentions: list[int] = []
        for turn in session.turns + [{"role": "seeker", "text": text,
                                      "items": self.scan_items(text)}]:
            marker = SEEKER_MARK if turn["role"] == "seeker" else REC_MARK
            context_ids.append(marker)
            context_ids.extend(vocab.encode(tokenize(turn["text"])))
            mention_tokens.extend(tokenize(turn["text"]))
            item_mentions.extend(turn.get("items", []))
        max_ctx = self.model.generator.cfg.max_context
        context_ids = context_ids[-max_ctx:]
        mention_idxs = self.linker.link_tokens(mention_tokens, item_mentions)
        result = self.model.respond(context_ids, mention_idxs)
        response_text = " ".join(result.response_tokens)
        template_text = " ".join(result.template_tokens)
        items = []
        slot_candidates = []
        if result.distribution is not None:
            probs = result.distribution.probabilities
            ids = result.distribution.candidate_ids
            for row, item in enumerate(result.filled_items):
                picked = ids.index(item)
                items.append(ItemCard(id=item,
                                      title=self.model.catalog.get(item, f"@{item}"),
                                      probability=float(probs[row][picked])))
                order = sorted(range(len(ids)), key=lambda i: (-probs[row][i], i))
                slot_candidates.append(SlotCandidates(
                    position=result.filled_positions[row],
                    items=[ItemCard(id=ids[i],
                                    title=self.model.catalog.get(ids[i], f"@{ids[i]}"),
                                    probability=float(probs[row][i]))
                           for i in order[:self.top_k_shown]]))
        return ChatResponse(session_id=session.id, response=response_text,
                            template=template_text, items=items,
                            slot_candidates=slot_candidates)


def create_app(model: NtrdModel, static_dir: str | Path | None = None,
               snapshot_path: str | Path | None = None) -> FastAPI:
    app = FastAPI(title="slot-template recommender chat")
    service = ChatService(model)
    sessions: dict[str, Session] = {}
    registry_lock = threading.Lock()

    @app.exception_handler(ApiError)
    async def handle_api_error(request: Request, exc: ApiError):
        return JSONResponse(status_code=exc.status,
                            content={"error": {"code": exc.code,
                                               "message": exc.message}})

    def get_session(session_id: str) -> Session:
        with registry_lock:
            session = sessions.get(session_id)
        if session is None:
            raise ApiError(404, "unknown_session", f"no session {session_id}")
        return session

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "sessions": len(sessions)}

    @app.post("/api/sessions", status_code=201)
    def create_session() -> CreateSessionResponse:
        session = Session()
        with registry_lock:
            sessions[session.id] = session
        return CreateSessionResponse(session_id=session.id)

    @app.get("/api/sessions/{session_id}")
    def session_info(session_id: str) -> SessionInfo:
        session = get_session(session_id)
        with session.lock:
            return SessionInfo(session_id=session.id, created=session.created,
                               last_active=session.last_active,
                               turns=list(session.turns))

    @app.delete("/api/sessions/{session_id}")
    def delete_session(session_id: str):
        get_session(session_id)
        with registry_lock:
            sessions.pop(session_id, None)
        return {"deleted": session_id}

    @app.post("/api/sessions/{session_id}/messages")
    def post_message(session_id: str, message: MessageRequest) -> ChatResponse:
        if len(message.text) > MAX_MESSAGE_CHARS:
            raise ApiError(400, "message_too_long",
                           f"message exceeds {MAX_MESSAGE_CHARS} characters")
        if not message.text.strip():
            raise ApiError(400, "empty_message", "message text is empty")
        session = get_session(session_id)
        with session.lock:
            reply = service.respond(session, message.text)
            session.turns.append({"role": "seeker", "text": message.text,
                                  "items": service.scan_items(message.text)})
            session.turns.append({"role": "recommender", "text": reply.response,
                                  "items": [card.id for card in reply.items]})
            session.last_active = time.time()
        return reply

    @app.on_event("shutdown")
    def snapshot():
        if snapshot_path is None:
            return
        with registry_lock:
            payload = [{"session_id": s.id, "created": s.created,
                        "last_active": s.last_active, "turns": s.turns}
                       for s in sessions.values()]
        Path(snapshot_path).write_text(json.dumps(payload, indent=2))
        log.info("wrote %d sessions to %s", len(payload), snapshot_path)

    if static_dir and Path(static_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(static_dir), html=True),
                  name="ui")
    return app


def app_from_checkpoint(path: str | Path, static_dir: str | Path | None = None,
                        snapshot_path: str | Path | None = None) -> FastAPI:
    model, _config, _ckpt = rebuild_from_checkpoint(path)
    if not isinstance(model, NtrdModel):
        raise ValueError("the chat service serves the slot-template model")
    return create_app(model, static_dir=static_dir, snapshot_path=snapshot_path)
