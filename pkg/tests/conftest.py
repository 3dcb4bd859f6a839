import threading
import time
from typing import Iterable, List, Sequence

import numpy as np
import pytest
import uvicorn

from app.matrix import ScoreMatrix
from app.schemas import EndpointConfig, ImageRef, RunManifest, ScoreRecord, Setting
from scripts.mock_judge_server import MockJudge, create_app


def make_manifest(
            generators: Sequence[str] = ("gen-a", "gen-b"),
            evaluators: Sequence[str] = ("gen-a", "gen-b"),
            n_images: int = 2,
            settings: Iterable[Setting] = (Setting.REFERENCE_BASED,),
            with_references: bool = True
        ) -> RunManifest:
    image_ids = [f"img-{k}" for k in range(n_images)]
    return RunManifest(
        generators=list(generators),
        evaluators=list(evaluators),
        images=[ImageRef(image_id=image_id) for image_id in image_ids],
        references={image_id: [f"a reference for {image_id}", "another reference"] for image_id in image_ids}
        if with_references else {},
        settings=list(settings),
    )


def full_scores(manifest: RunManifest, raw=lambda i, j, k: 50) -> List[ScoreRecord]:
    """One record per cell of the manifest, raw score from raw(i, j, k)"""
    records = []
    for setting in manifest.settings:
        for i, generator in enumerate(manifest.generators):
            for j, evaluator in enumerate(manifest.evaluators):
                for k, image_id in enumerate(manifest.image_ids):
                    records.append(ScoreRecord(
                        image_id=image_id,
                        generator=generator,
                        evaluator=evaluator,
                        setting=setting,
                        raw_score=raw(i, j, k),
                    ))
    return records


def make_phi(values, generators=None, evaluators=None, setting=Setting.REFERENCE_BASED) -> ScoreMatrix:
    values = np.asarray(values, dtype=float)
    generators = generators or [f"m{i}" for i in range(values.shape[0])]
    evaluators = evaluators or [f"m{j}" for j in range(values.shape[1])]
    return ScoreMatrix(generators, evaluators, values, np.ones(values.shape, dtype=np.int64), setting)


@pytest.fixture
def manifest() -> RunManifest:
    return make_manifest()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


class _ThreadedServer(uvicorn.Server):
    def install_signal_handlers(self):
        pass


@pytest.fixture
def start_mock_judge():
    """Start MockJudge instances on free ports; returns (judge, base_url)"""
    servers = []

    def start(**kwargs):
        judge = MockJudge(**kwargs)
        server = _ThreadedServer(uvicorn.Config(create_app(judge), host="127.0.0.1", port=0, log_level="warning"))
        thread = threading.Thread(target=server.run, daemon=True)
        thread.start()
        deadline = time.time() + 10
        while not server.started:
            if time.time() > deadline:
                raise RuntimeError("mock judge did not start")
            time.sleep(0.01)
        port = server.servers[0].sockets[0].getsockname()[1]
        servers.append((server, thread))
        return judge, f"http://127.0.0.1:{port}/v1"

    yield start

    for server, thread in servers:
        server.should_exit = True
        thread.join(timeout=5)


def mock_endpoint(base_url: str, model_name: str, **kwargs) -> EndpointConfig:
    settings = {
        "base_url": base_url,
        "model_name": model_name,
        "api_key_env": "MOCK_JUDGE_KEY",
        "max_parallel": 2,
        "requests_per_minute": 60_000,
        "max_retries": 3,
        "timeout": 10,
        "image_transport": "none",
    }
    settings.update(kwargs)
    return EndpointConfig(**settings)
