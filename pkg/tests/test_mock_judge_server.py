import pytest
from fastapi.testclient import TestClient

from app.collector import parse_score
from app.exceptions import ParseError
from scripts.mock_judge_server import MockJudge, create_app, hash_score

JUDGE_PROMPT = "Rate the caption.\n\nGenerated captions:\na dog on a beach\n\nAnswer in one paragraph."


def post(client, content, model="judge-7b"):
    return client.post("/v1/chat/completions", json={
        "model": model,
        "temperature": 0.0,
        "messages": [{"role": "system", "content": "be strict"}, {"role": "user", "content": content}],
    })


def test_judge_reply_carries_hash_score():
    client = TestClient(create_app(MockJudge()))

    response = post(client, JUDGE_PROMPT)

    assert response.status_code == 200
    body = response.json()
    assert body["model"] == "judge-7b"
    assert parse_score(body["choices"][0]["message"]["content"]) == hash_score("judge-7b", "a dog on a beach")


def test_image_parts_are_read_as_text():
    client = TestClient(create_app(MockJudge(constant_score=42)))

    response = post(client, [
        {"type": "image_url", "image_url": {"url": "data:image/png;base64,AAAA"}},
        {"type": "text", "text": JUDGE_PROMPT},
    ])

    assert parse_score(response.json()["choices"][0]["message"]["content"]) == 42


def test_caption_prompt_gets_a_caption():
    client = TestClient(create_app(MockJudge()))

    text = post(client, "Describe the image in one sentence.").json()["choices"][0]["message"]["content"]

    assert text.startswith("A photo of scene ")


def test_scripted_failures_then_noncompliant_then_score():
    judge = MockJudge(constant_score=10, fail_first=1, noncompliant_first=1)
    client = TestClient(create_app(judge))

    failed = post(client, JUDGE_PROMPT)
    vague = post(client, JUDGE_PROMPT)
    scored = post(client, JUDGE_PROMPT)

    assert failed.status_code == 500
    assert failed.json()["error"]["type"] == "server_error"
    with pytest.raises(ParseError):
        parse_score(vague.json()["choices"][0]["message"]["content"])
    assert parse_score(scored.json()["choices"][0]["message"]["content"]) == 10
    assert judge.requests == 3


def test_malformed_body_is_rejected():
    client = TestClient(create_app(MockJudge()))

    response = client.post("/v1/chat/completions", json={"messages": "not a list"})

    assert response.status_code == 422
