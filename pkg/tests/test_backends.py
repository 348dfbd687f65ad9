import base64

import numpy as np
import pytest
import requests
from fastapi.testclient import TestClient
from pydantic import ValidationError

from evoscene.backends.base import CompletionRequest, SynthesisRequest
from evoscene.backends.oracle import OracleCompleter, OracleScene, oracle_depth
from evoscene.backends.remote import (
    RemoteClient,
    RemoteDepthEstimator,
    RemotePerceptualLoss,
    RemoteSceneCompleter,
    RemoteViewSynthesizer,
)
from evoscene.errors import BackendError, ContractError, NoDataError, TransportError
from evoscene.geometry import CameraIntrinsics, CameraPose
from evoscene.main import create_app
from evoscene.occupancy import VoxelState
from evoscene.schemas import PROTOCOL_VERSION, ArrayPayload, DepthResponse, SynthesizeResponse
from evoscene.trajectory import OrbitSpec, TrajectoryPose, orbital_trajectory


class FakeResponse:
    def __init__(self, status_code=200, payload=None, text=None):
        self.status_code = status_code
        self._payload = payload
        self.text = text if text is not None else str(payload)

    def json(self):
        if self._payload is None:
            raise ValueError("no es JSON")
        return self._payload


class FakeSession:
    """Devuelve (o lanza) los elementos de `script` en orden; el último se repite."""

    def __init__(self, *script):
        self.script = list(script)
        self.calls = 0

    def post(self, url, json=None, timeout=None):
        item = self.script[min(self.calls, len(self.script) - 1)]
        self.calls += 1
        if isinstance(item, Exception):
            raise item
        return item


def ok(data):
    return FakeResponse(200, {"success": True, "data": data})


def depth_data(shape=(2, 3)):
    return DepthResponse(depth=ArrayPayload.encode(np.ones(shape))).model_dump(mode="json")


def fake_client(*script):
    sleeps = []
    client = RemoteClient("http://backend", session=FakeSession(*script), sleep=sleeps.append)
    return client, sleeps


# =====================================
# TRANSPORTE Y REINTENTOS
# =====================================

def test_transient_failures_are_retried_with_exponential_backoff():
    client, sleeps = fake_client(FakeResponse(503), requests.ConnectionError("caído"), ok(depth_data()))

    estimate = RemoteDepthEstimator(client).estimate(np.zeros((2, 3, 3)))

    assert sleeps == [1.0, 2.0]
    assert estimate.depth.values.shape == (2, 3)
    assert [a["ok"] for a in client.last_attempts] == [False, False, True]


def test_exhausted_retries_raise_transport_error():
    client, sleeps = fake_client(FakeResponse(503), requests.Timeout("lento"))

    with pytest.raises(TransportError) as info:
        RemoteDepthEstimator(client).estimate(np.zeros((2, 3, 3)))

    assert len(info.value.attempts) == 4
    assert sleeps == [1.0, 2.0, 4.0]
    assert info.value.to_dict()["error_code"] == "transport_error"


def test_client_errors_are_not_retried():
    client, sleeps = fake_client(FakeResponse(400, {"detail": "imagen vacía"}))

    with pytest.raises(BackendError, match="imagen vacía"):
        RemoteDepthEstimator(client).estimate(np.zeros((2, 3, 3)))

    assert client.sess.calls == 1
    assert sleeps == []


# =====================================
# CONTRATO DE RESPUESTA
# =====================================

def test_missing_field_names_the_field():
    client, _ = fake_client(ok({"protocol": PROTOCOL_VERSION}))

    with pytest.raises(ContractError) as info:
        RemoteDepthEstimator(client).estimate(np.zeros((2, 3, 3)))

    assert info.value.field == "depth"
    assert info.value.exit_code == 3


def test_error_envelope_and_malformed_bodies():
    client, _ = fake_client(FakeResponse(200, {"success": False, "detail": "sin GPU"}))
    with pytest.raises(BackendError) as info:
        RemoteDepthEstimator(client).estimate(np.zeros((2, 3, 3)))
    assert type(info.value) is BackendError

    client, _ = fake_client(FakeResponse(200, {"success": True, "data": [1, 2]}))
    with pytest.raises(ContractError) as info:
        RemoteDepthEstimator(client).estimate(np.zeros((2, 3, 3)))
    assert info.value.field == "data"

    client, _ = fake_client(FakeResponse(200, None, text="<html>"))
    with pytest.raises(ContractError):
        RemoteDepthEstimator(client).estimate(np.zeros((2, 3, 3)))


def test_depth_with_wrong_shape_violates_contract():
    client, _ = fake_client(ok(depth_data((3, 3))))

    with pytest.raises(ContractError) as info:
        RemoteDepthEstimator(client).estimate(np.zeros((2, 3, 3)))
    assert info.value.field == "depth.shape"


def synthesis_request(n_frames=2, size=(4, 4)):
    K = CameraIntrinsics.from_fov(*size)
    trajectory = [TrajectoryPose(float(k), K, CameraPose.identity()) for k in range(n_frames)]
    return SynthesisRequest(
        seed_image=np.zeros((size[1], size[0], 3)),
        disparity=[],
        trajectory=trajectory,
        view_ids=[f"t1_f{k:03d}" for k in range(n_frames)],
        size=size,
    )


def test_wrong_frame_count_violates_contract():
    data = SynthesizeResponse(frames=[ArrayPayload.encode(np.zeros((4, 4, 3)))]).model_dump(mode="json")
    client, _ = fake_client(ok(data))

    with pytest.raises(ContractError) as info:
        RemoteViewSynthesizer(client).synthesize(synthesis_request(n_frames=2))
    assert info.value.field == "frames"


def test_wrong_frame_size_names_the_frame():
    frames = [ArrayPayload.encode(np.zeros((4, 4, 3))), ArrayPayload.encode(np.zeros((5, 4, 3)))]
    client, _ = fake_client(ok(SynthesizeResponse(frames=frames).model_dump(mode="json")))

    with pytest.raises(ContractError) as info:
        RemoteViewSynthesizer(client).synthesize(synthesis_request(n_frames=2))
    assert info.value.field == "frames.1"


# =====================================
# PAYLOADS
# =====================================

def test_payload_requires_exactly_one_source():
    with pytest.raises(ValidationError):
        ArrayPayload(dtype="<f8", shape=[1])
    with pytest.raises(ValidationError):
        ArrayPayload(dtype="<f8", shape=[1], data="AA==", path="x.npy")


def test_payload_size_must_match_declared_shape():
    payload = ArrayPayload(dtype="<f8", shape=[3], data=base64.b64encode(np.zeros(2).tobytes()).decode())

    with pytest.raises(ContractError) as info:
        payload.decode()
    assert info.value.field == "shape"


def test_session_dir_payloads_stay_inside_the_directory(tmp_path):
    array = np.arange(6.0).reshape(2, 3)

    payload = ArrayPayload.encode(array, tmp_path)

    assert payload.data is None
    np.testing.assert_array_equal(payload.decode(tmp_path), array)
    escape = ArrayPayload(dtype="<f8", shape=[2, 3], path="../fuera.npy")
    with pytest.raises(ContractError) as info:
        escape.decode(tmp_path)
    assert info.value.field == "path"
    with pytest.raises(ContractError):
        payload.decode(None)


# =====================================
# SERVIDOR MOCK
# =====================================

@pytest.fixture
def server(box_spec):
    with TestClient(create_app(box_spec)) as client:
        yield client


@pytest.fixture
def remote(server):
    return RemoteClient("http://testserver", session=server, sleep=lambda s: None)


def test_root_and_health(server):
    root = server.get("/")
    assert root.status_code == 200
    assert root.json()["protocol"] == PROTOCOL_VERSION

    health = server.get("/health")
    assert health.status_code == 200
    assert health.json()["status"] == "healthy"


def test_health_reports_missing_session_dir(box_spec, tmp_path):
    with TestClient(create_app(box_spec, session_dir=tmp_path / "no-existe")) as client:
        response = client.get("/health")
    assert response.status_code == 503
    assert response.json()["status"] == "unhealthy"


def test_unknown_route_is_not_found(server):
    response = server.get("/no-existe")

    assert response.status_code == 404
    assert response.json()["error_code"] == "not_found"
    assert response.json()["success"] is False


def test_bad_protocol_is_a_schema_error(server):
    body = {"protocol": "otro/9", "image": ArrayPayload.encode(np.zeros((2, 2, 3))).model_dump(mode="json")}

    response = server.post("/depth", json=body)

    assert response.status_code == 422
    assert response.json()["error_code"] == "schema_error"


def test_unknown_view_is_not_found(server):
    body = {"view_id": "fantasma", "image": ArrayPayload.encode(np.zeros((2, 2, 3))).model_dump(mode="json")}

    response = server.post("/depth", json=body)

    assert response.status_code == 404
    assert "fantasma" in response.json()["detail"]


def test_remote_depth_matches_local_oracle(box_spec, remote):
    image = OracleScene(box_spec).seed_image()

    estimate = RemoteDepthEstimator(remote, returns_pose=True).estimate(image, view_id="seed")

    expected, K, E = oracle_depth(OracleScene(box_spec), "seed")
    np.testing.assert_array_equal(estimate.depth.values, expected.values)
    assert estimate.intrinsics == K
    assert estimate.pose.allclose(E)


def test_remote_completion_matches_local_completer(remote):
    states = np.zeros((6, 6, 6), dtype=np.uint8)
    states[1:5, 2, 2] = VoxelState.OBSERVED
    states[0, 0, 0] = VoxelState.FREE
    request = CompletionRequest(0, (0, 0, 0), states, [], np.zeros(3), 0.1)

    response = RemoteSceneCompleter(remote).complete(request)

    np.testing.assert_array_equal(response.occupancy, OracleCompleter().complete(request).occupancy)
    assert response.colors.shape == (6, 6, 6, 3)


def test_remote_synthesis_registers_new_views(box_spec, remote):
    K, E = box_spec.seed_camera()
    seed = OracleScene(box_spec).seed_image()
    spec = OrbitSpec(np.zeros(3), float(np.linalg.norm(E.center)), E, K, (0.0, 20.0), 2)
    request = SynthesisRequest(
        seed_image=seed, disparity=[], trajectory=orbital_trajectory(spec),
        view_ids=["t1_f000", "t1_f001"], size=(K.width, K.height),
    )

    response = RemoteViewSynthesizer(remote).synthesize(request)

    assert len(response.frames) == 2
    np.testing.assert_allclose(response.frames[0], seed, atol=1.0 / 255)
    estimate = RemoteDepthEstimator(remote).estimate(response.frames[1], view_id="t1_f001")
    assert estimate.depth.mask.any()


def test_remote_perceptual_loss(remote):
    frame = np.zeros((4, 4, 3))
    target = np.full((4, 4, 3), 0.25)

    value, gradient = RemotePerceptualLoss(remote)(frame, target)

    assert value == pytest.approx(0.25)
    assert gradient.shape == frame.shape


def test_files_in_session_dir(box_spec, tmp_path):
    with TestClient(create_app(box_spec, session_dir=tmp_path)) as server:
        client = RemoteClient("http://testserver", session=server, session_dir=tmp_path)
        image = OracleScene(box_spec).seed_image()

        estimate = RemoteDepthEstimator(client).estimate(image, view_id="seed")

    assert estimate.depth.values.shape == image.shape[:2]
    assert list(tmp_path.glob("*.npy"))


def test_oracle_scene_rejects_unknown_views(box_spec):
    with pytest.raises(NoDataError):
        OracleScene(box_spec).camera("t9_f000")
