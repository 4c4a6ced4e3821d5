import base64
import json
import threading
import urllib.request

import pytest

from egonav.errors import PortInUse, ScriptError, WireError
from egonav.memory import MemoryDigest
from egonav.prompts import (
    PromptKind,
    build_prompt,
    classify_prompt,
    marker_description_prompt,
    memory_retrieval_prompt,
    marker_selection_prompt,
    rationale_filter_prompt,
    rationale_generation_prompt,
)
from egonav.wire import Script, ScriptedClient, StubServer, WireClient


class _Ctx:
    goal_category = "tv"
    digest = MemoryDigest(((97, "Located near a sofa."), (98, "Located near a sink.")))

    def retrieval_entries(self):
        return [(i, f"desc {i}") for i in range(5)]


def test_selection_prompt_lists_digest():
    text = build_prompt(PromptKind.MARKER_SELECTION, _Ctx())
    assert "97: Located near a sofa." in text and "98: Located near a sink." in text
    assert "Your task is to find the tv." in text
    assert text.rstrip().endswith("Action: [put a single marker id or None here]")


def test_retrieval_prompt_lists_all_entries():
    text = build_prompt(PromptKind.MEMORY_RETRIEVAL, _Ctx())
    for i in range(5):
        assert f"{i}: desc {i}" in text
    assert "use -1 to occupy the empty position" in text


def test_prompts_are_byte_stable():
    assert build_prompt("MARKER_SELECTION", _Ctx()) == build_prompt("MARKER_SELECTION", _Ctx())
    assert marker_description_prompt() == build_prompt("MARKER_DESCRIPTION")


def test_key_template_phrases():
    assert marker_description_prompt().startswith("You are an automated system with the capability to analyze the provided image.")
    assert "Number List: [first number, second number, third number]" in memory_retrieval_prompt("tv", [])
    assert "**Do not mention the red trajectory/line or \"the image\" in your output!**" in rationale_generation_prompt("tv")
    assert "OBJECTS_RED_LINE:\nLOCATION_PREDICTION_AND_REASONING:" in rationale_generation_prompt("tv")
    filt = rationale_filter_prompt("tv", "a chair", "because")
    assert 'output "GOOD REASONINGS", otherwise, output "BAD REASONINGS"' in filt
    assert filt.rstrip().endswith("Object list: a chair\nReasonings: because")


@pytest.mark.parametrize(
    "text,kind",
    [
        (marker_description_prompt(), PromptKind.MARKER_DESCRIPTION),
        (memory_retrieval_prompt("tv", [(1, "x")]), PromptKind.MEMORY_RETRIEVAL),
        (marker_selection_prompt("tv", []), PromptKind.MARKER_SELECTION),
        (rationale_generation_prompt("tv"), PromptKind.RATIONALE_GENERATION),
        (rationale_filter_prompt("tv", "a", "b"), PromptKind.RATIONALE_FILTER),
        ("hello", None),
    ],
)
def test_classify(text, kind):
    assert classify_prompt(text) is kind


# -- scripts ----------------------------------------------------------------


def test_script_sequences_repeat_last():
    s = Script({"MARKER_SELECTION": ["Action: 1", "Action: 2"]})
    p = marker_selection_prompt("tv", [])
    assert [s.reply(p)[1] for _ in range(3)] == ["Action: 1", "Action: 2", "Action: 2"]


def test_script_rejects_unknown_kind():
    with pytest.raises(ScriptError):
        Script({"NOPE": "x"})
    with pytest.raises(ScriptError):
        Script({"MARKER_SELECTION": [{"oops": 1}]})


def test_script_load_from_yaml(tmp_path):
    path = tmp_path / "s.yaml"
    path.write_text("MARKER_SELECTION: 'Action: 0'\nMEMORY_RETRIEVAL:\n  - error: boom\n")
    s = Script.load(path)
    assert s.reply(marker_selection_prompt("tv", [])) == (True, "Action: 0")
    assert s.reply(memory_retrieval_prompt("tv", [])) == (False, "boom")
    (tmp_path / "bad.yaml").write_text("[1, 2]")
    with pytest.raises(ScriptError):
        Script.load(tmp_path / "bad.yaml")


def test_scripted_client_raises_on_unscripted():
    c = ScriptedClient({"MARKER_SELECTION": "Action: 0"})
    with pytest.raises(WireError):
        c.complete(marker_description_prompt())


# -- HTTP -------------------------------------------------------------------


@pytest.fixture
def server():
    s = StubServer(Script({"MARKER_SELECTION": "Thought: ok\nAction: 0", "MARKER_DESCRIPTION": {"error": "not today"}}))
    with s:
        yield s


def test_round_trip_over_http(server):
    client = WireClient(server.url, seed=3, max_tokens=50)
    assert client.complete(marker_selection_prompt("tv", []), images=[b"\x89PNG"]) == "Thought: ok\nAction: 0"
    assert server.requests[-1] == {"status": 200, "kind": "MARKER_SELECTION", "images": 1}


def test_unscripted_kind_is_protocol_error(server):
    with pytest.raises(WireError, match="422"):
        WireClient(server.url).complete(memory_retrieval_prompt("tv", []))
    with pytest.raises(WireError, match="not today"):
        WireClient(server.url).complete(marker_description_prompt())


def _post(url, data: bytes):
    req = urllib.request.Request(url, data=data, headers={"Content-Type": "application/json"}, method="POST")
    try:
        with urllib.request.urlopen(req, timeout=5) as r:
            return r.status, json.loads(r.read())
    except urllib.error.HTTPError as e:
        return e.code, json.loads(e.read())


def test_malformed_body_is_4xx(server):
    assert _post(server.url, b"{not json")[0] == 400
    assert _post(server.url, json.dumps({"model": "m"}).encode())[0] == 400
    assert _post(server.url, json.dumps({"model": "m", "prompt": "p", "images": ["!!"]}).encode())[0] == 400
    # the server is still alive
    assert WireClient(server.url).complete(marker_selection_prompt("tv", [])).endswith("Action: 0")


def test_concurrent_requests(server):
    out, errs = [], []

    def hit():
        try:
            out.append(WireClient(server.url).complete(marker_selection_prompt("tv", [])))
        except Exception as exc:  # pragma: no cover - surfaced below
            errs.append(exc)

    threads = [threading.Thread(target=hit) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errs and len(out) == 8


def test_bearer_token(monkeypatch):
    with StubServer(Script({"MARKER_SELECTION": "Action: 0"}), token="s3cret") as s:
        monkeypatch.delenv("EGONAV_API_TOKEN", raising=False)
        with pytest.raises(WireError, match="401"):
            WireClient(s.url).complete(marker_selection_prompt("tv", []))
        monkeypatch.setenv("EGONAV_API_TOKEN", "s3cret")
        assert WireClient(s.url).complete(marker_selection_prompt("tv", [])) == "Action: 0"


def test_endpoint_from_environment(monkeypatch):
    monkeypatch.delenv("EGONAV_ENDPOINT", raising=False)
    with pytest.raises(WireError):
        WireClient()
    monkeypatch.setenv("EGONAV_ENDPOINT", "http://127.0.0.1:9/x")
    assert WireClient().endpoint == "http://127.0.0.1:9/x"


def test_transport_failure_is_wire_error():
    with pytest.raises(WireError):
        WireClient("http://127.0.0.1:9/none", timeout=1).complete("x")


def test_port_in_use(server):
    port = server.httpd.server_address[1]
    with pytest.raises(PortInUse):
        StubServer(Script({}), port=port)


def test_images_travel_as_base64(server):
    payload = b"\x00\x01binary"
    WireClient(server.url).complete(marker_selection_prompt("tv", []), images=[payload, base64.b64encode(payload).decode()])
    assert server.requests[-1]["images"] == 2
