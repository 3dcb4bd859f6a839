"""
    Mock OpenAI-compatible judge for local runs and tests.
    Serves POST /v1/chat/completions. Judge prompts get a reply ending in
    "The final score is $NN$." with NN derived from a hash of the model and
    caption; other prompts get a one-sentence caption. Failures can be scripted
    per distinct prompt: first HTTP 500s, then replies with no score.
"""

import hashlib
import re
import threading
from collections import Counter
from typing import List, Optional, Union

import typer
import uvicorn
from fastapi import FastAPI
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from app.logger import logger

CAPTION_PATTERN = re.compile(r"Generated captions:\n(.*?)(?:\n\n|\Z)", re.DOTALL)


class ChatMessage(BaseModel):
    role: str
    content: Union[str, List[dict], None] = ""

    def text(self) -> str:
        if self.content is None:
            return ""
        if isinstance(self.content, str):
            return self.content
        return "".join(part.get("text", "") for part in self.content if part.get("type") == "text")


class ChatRequest(BaseModel):
    model: str = Field(default="mock", description="Model name the client asked for")
    messages: List[ChatMessage] = Field(default_factory=list)


def hash_score(model: str, caption: str) -> int:
    digest = hashlib.sha256(f"{model}|{caption}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big") % 101


class MockJudge:
    """Scripted judge behaviour shared by every request to one app.

    Args:
        constant_score (Optional[int]): reply with this score instead of the hash score
        fail_first (int): HTTP 500 for the first n requests of each distinct prompt
        noncompliant_first (int): after the failures, n replies without a dollar score
    """

    def __init__(self, constant_score: Optional[int] = None, fail_first: int = 0, noncompliant_first: int = 0):
        self.constant_score = constant_score
        self.fail_first = fail_first
        self.noncompliant_first = noncompliant_first
        self.requests = 0
        self._seen: Counter = Counter()
        self._lock = threading.Lock()

    def reply_for(self, model: str, prompt: str) -> Optional[str]:
        """Reply text, or None for a scripted HTTP failure"""
        key = hashlib.sha256(f"{model}|{prompt}".encode("utf-8")).hexdigest()
        with self._lock:
            self.requests += 1
            self._seen[key] += 1
            count = self._seen[key]

        if count <= self.fail_first:
            return None

        match = CAPTION_PATTERN.search(prompt)
        if match is None:
            return f"A photo of scene {key[:8]}."

        caption = match.group(1).strip()
        if count <= self.fail_first + self.noncompliant_first:
            return "I think this caption is fairly good overall."
        score = self.constant_score if self.constant_score is not None else hash_score(model, caption)
        return f"The caption mentions the main subject. The final score is ${score}$."


def create_app(judge: MockJudge) -> FastAPI:
    """FastAPI app answering chat completions with the given judge"""
    app = FastAPI(title="Mock judge")

    @app.post("/v1/chat/completions")
    def chat_completions(request: ChatRequest):
        user_turns = [message for message in request.messages if message.role == "user"]
        prompt = user_turns[-1].text() if user_turns else ""
        text = judge.reply_for(request.model, prompt)
        if text is None:
            return JSONResponse(
                status_code=500,
                content={"error": {"message": "scripted failure", "type": "server_error"}},
            )

        return {
            "id": "chatcmpl-mock",
            "object": "chat.completion",
            "created": 0,
            "model": request.model,
            "choices": [{
                "index": 0,
                "message": {"role": "assistant", "content": text},
                "finish_reason": "stop",
            }],
            "usage": {"prompt_tokens": 0, "completion_tokens": 0, "total_tokens": 0},
        }

    return app


def main(
            host: str = typer.Option("127.0.0.1", "--host"),
            port: int = typer.Option(8000, "--port"),
            constant_score: Optional[int] = typer.Option(None, "--constant-score"),
            fail_first: int = typer.Option(0, "--fail-first"),
            noncompliant_first: int = typer.Option(0, "--noncompliant-first")
        ):
    """Serve the mock judge at http://HOST:PORT/v1"""
    logger.info(f"Starting mock judge on {host}:{port}")
    app = create_app(MockJudge(constant_score, fail_first, noncompliant_first))
    uvicorn.run(app, host=host, port=port, log_level="warning")


if __name__ == "__main__":
    typer.run(main)
