"""Respondent backends: a generic remote chat client, an echo backend and a
synthetic respondent drawn from a known latent-variable population."""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Protocol, Sequence

import httpx
import numpy as np

from .instruments import (
    LIKERT_MAX,
    LIKERT_MIN,
    OBSERVED_ORDER,
    QuestionnaireCatalog,
    load_catalog,
)
from .parser import format_scores

log = logging.getLogger(__name__)


class BackendError(RuntimeError):
    """A failed backend call. ``kind`` is one of timeout, auth, rate_limit,
    server, client, protocol."""

    def __init__(self, kind: str, message: str, retryable: bool, retry_after: float | None = None):
        super().__init__(f"{kind}: {message}")
        self.kind = kind
        self.retryable = retryable
        self.retry_after = retry_after


class SimError(ValueError):
    pass


class RespondentBackend(Protocol):
    name: str
    supports_temperature: bool

    def answer(self, prompt: str, temperature: float, seed: int) -> str: ...


class _Base:
    name: str = ""
    supports_temperature: bool = False

    def chat(self, prompt: str, temperature: float = 0.7, seed: int = 0) -> str:
        return self.answer(prompt, temperature, seed)


class EchoBackend(_Base):
    """Returns the prompt unchanged."""

    def __init__(self, name: str = "echo"):
        self.name = name

    def answer(self, prompt: str, temperature: float, seed: int) -> str:
        if not prompt:
            raise ValueError("prompt must be non-empty")
        return prompt


# ---------------------------------------------------------------------------
# remote chat-completion client

DEFAULT_REQUEST = {
    "messages": [{"role": "user", "content": "{prompt}"}],
    "temperature": "{temperature}",
    "seed": "{seed}",
}
DEFAULT_RESPONSE_PATH = "choices.0.message.content"


def _fill(template: Any, values: Mapping[str, Any]) -> Any:
    """Substitute ``{name}`` placeholders; a string that is exactly one
    placeholder takes the raw (possibly numeric) value."""
    if isinstance(template, dict):
        return {k: _fill(v, values) for k, v in template.items()}
    if isinstance(template, list):
        return [_fill(v, values) for v in template]
    if isinstance(template, str):
        m = re.fullmatch(r"\{(\w+)\}", template)
        if m and m.group(1) in values:
            return values[m.group(1)]
        out = template
        for k, v in values.items():
            out = out.replace("{" + k + "}", str(v))
        return out
    return template


def extract_path(payload: Any, path: str) -> Any:
    cur = payload
    for part in path.split("."):
        if isinstance(cur, list):
            try:
                cur = cur[int(part)]
            except (ValueError, IndexError):
                raise BackendError("protocol", f"response has no element {part!r} on path {path!r}", False) from None
        elif isinstance(cur, dict) and part in cur:
            cur = cur[part]
        else:
            raise BackendError("protocol", f"response lacks field {part!r} on path {path!r}", False)
    return cur


def _retry_after(resp: httpx.Response) -> float | None:
    value = resp.headers.get("retry-after")
    if value is None:
        return None
    try:
        return max(0.0, float(value))
    except ValueError:
        return None


class RemoteBackend(_Base):
    """One HTTP chat-completion call per answer.

    Endpoint, headers, request body and response field path all come from
    configuration, so any JSON chat API can be targeted. Credentials are
    read from the environment variable named by ``auth_env``.
    """

    supports_temperature = True

    def __init__(
        self,
        name: str,
        endpoint: str,
        *,
        auth_env: str | None = None,
        headers: Mapping[str, str] | None = None,
        request_template: Mapping[str, Any] | None = None,
        response_path: str = DEFAULT_RESPONSE_PATH,
        model: str | None = None,
        timeout: float = 60.0,
        max_in_flight: int = 4,
        max_retries: int = 3,
        backoff: float = 1.0,
        client: httpx.Client | None = None,
        sleep=time.sleep,
    ):
        self.name = name
        self.endpoint = endpoint
        self.auth_env = auth_env
        self.headers = dict(headers or ({"Authorization": "Bearer {key}"} if auth_env else {}))
        self.request_template = dict(request_template or DEFAULT_REQUEST)
        if model is not None:
            self.request_template.setdefault("model", model)
        self.response_path = response_path
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff
        self._sem = threading.BoundedSemaphore(max(1, int(max_in_flight)))
        self._client = client or httpx.Client(timeout=timeout)
        self._sleep = sleep

    def _headers(self) -> dict[str, str]:
        values = {}
        if self.auth_env:
            key = os.environ.get(self.auth_env)
            if not key:
                raise BackendError("auth", f"environment variable {self.auth_env} is not set", False)
            values["key"] = key
        return {k: _fill(v, values) for k, v in self.headers.items()}

    def _call(self, body) -> str:
        try:
            with self._sem:
                resp = self._client.post(self.endpoint, json=body, headers=self._headers(), timeout=self.timeout)
        except httpx.TimeoutException as exc:
            raise BackendError("timeout", str(exc) or "request timed out", True) from None
        except httpx.TransportError as exc:
            raise BackendError("server", f"transport error: {exc}", True) from None
        status = resp.status_code
        if status in (401, 403):
            raise BackendError("auth", f"HTTP {status}", False)
        if status == 429:
            raise BackendError("rate_limit", "HTTP 429", True, _retry_after(resp))
        if status >= 500:
            raise BackendError("server", f"HTTP {status}", True, _retry_after(resp))
        if status >= 400:
            raise BackendError("client", f"HTTP {status}: {resp.text[:200]}", False)
        try:
            payload = resp.json()
        except (json.JSONDecodeError, ValueError):
            raise BackendError("protocol", "response body is not JSON", False) from None
        text = extract_path(payload, self.response_path)
        if not isinstance(text, str):
            raise BackendError("protocol", f"value at {self.response_path!r} is not text", False)
        return text

    def answer(self, prompt: str, temperature: float, seed: int) -> str:
        if not prompt:
            raise ValueError("prompt must be non-empty")
        body = _fill(self.request_template, {"prompt": prompt, "temperature": temperature, "seed": seed})
        attempt = 0
        while True:
            try:
                return self._call(body)
            except BackendError as exc:
                if not exc.retryable or attempt >= self.max_retries:
                    raise
                wait = exc.retry_after if exc.retry_after is not None else self.backoff * 2**attempt
                log.warning("%s: %s, retrying in %.1fs", self.name, exc, wait)
                self._sleep(wait)
                attempt += 1


# ---------------------------------------------------------------------------
# synthetic population

N_OBS = len(OBSERVED_ORDER)
_IND = (0, 1, 2)  # Awareness, Control, Collection
_PSA = 3
_OUT = (4, 5, 6)  # SacrificePrivacy, PastAcceptance, FutureWillingness


@dataclass(frozen=True)
class SyntheticPopulationParams:
    """Generative parameters of one synthetic respondent population.

    Dimension-level continuous scores follow
    ``indicator = nu + lambda * eta + e``, ``PSA = t + nu_PSA + e`` and
    ``outcome = nu + b_PSA (t - psa_mean) + b_Priv * eta + e``, with
    ``eta ~ N(0, psi)`` and ``t ~ N(psa_mean, psa_var)``. Each item adds
    independent noise with SD ``item_sd`` to its dimension score before
    rounding half up and clamping to the response scale.
    """

    loadings: tuple[float, float, float] = (1.0, 0.8, 0.9)
    psi: float = 0.8
    # PSA->SP, PSA->PA, PSA->FW, Priv->SP, Priv->PA, Priv->FW
    paths: tuple[float, ...] = (0.5, 0.4, 0.5, -0.5, -0.4, -0.5)
    psa_mean: float = 4.8
    psa_var: float = 0.6
    intercepts: tuple[float, ...] = (5.0, 5.0, 4.8, 0.0, 3.5, 3.2, 3.6)
    residual_sds: tuple[float, ...] = (0.5, 0.6, 0.55, 0.0, 0.6, 0.6, 0.6)
    # residual correlations (SP,PA), (SP,FW), (PA,FW)
    aods_residual_corr: tuple[float, float, float] = (0.3, 0.3, 0.4)
    # residual correlations (Aw,Ctl), (Aw,Col), (Ctl,Col)
    indicator_residual_corr: tuple[float, float, float] = (0.0, 0.0, 0.0)
    item_sd: float = 0.6
    discretization: str = "round_half_up"
    allow_singular: bool = False

    def __post_init__(self):
        if len(self.loadings) != 3 or len(self.paths) != 6:
            raise ValueError("need 3 loadings and 6 paths")
        if len(self.intercepts) != N_OBS or len(self.residual_sds) != N_OBS:
            raise ValueError(f"need {N_OBS} intercepts and residual SDs")
        if self.discretization != "round_half_up":
            raise ValueError(f"unknown discretization policy {self.discretization!r}")
        if not self.psi > 0 or self.psa_var < 0 or self.item_sd < 0 or min(self.residual_sds) < 0:
            raise ValueError("variances and SDs must be nonnegative (psi positive)")
        for r in self.aods_residual_corr + self.indicator_residual_corr:
            if not -1.0 <= r <= 1.0:
                raise ValueError("residual correlations must lie in [-1, 1]")
        R = self.residual_corr()
        eig = np.linalg.eigvalsh(R)
        if self.allow_singular:
            if eig[0] < -1e-10:
                raise ValueError("residual correlation matrix is not positive semidefinite")
        else:
            if eig[0] <= 1e-10:
                raise ValueError("residual correlation matrix is not positive definite")
            if np.linalg.eigvalsh(self.implied_cov())[0] <= 1e-10:
                raise ValueError("implied covariance is not positive definite")

    def residual_corr(self) -> np.ndarray:
        R = np.eye(N_OBS)
        for (i, j), r in zip(((4, 5), (4, 6), (5, 6)), self.aods_residual_corr):
            R[i, j] = R[j, i] = r
        for (i, j), r in zip(((0, 1), (0, 2), (1, 2)), self.indicator_residual_corr):
            R[i, j] = R[j, i] = r
        return R

    def residual_cov(self) -> np.ndarray:
        d = np.asarray(self.residual_sds, dtype=float)
        return self.residual_corr() * np.outer(d, d)

    def structure(self) -> np.ndarray:
        """7x2 coefficients of (eta, t) in the continuous dimension scores."""
        B = np.zeros((N_OBS, 2))
        B[list(_IND), 0] = self.loadings
        B[_PSA, 1] = 1.0
        B[list(_OUT), 1] = self.paths[:3]
        B[list(_OUT), 0] = self.paths[3:]
        return B

    def implied_cov(self) -> np.ndarray:
        """Covariance of the continuous (pre-noise, pre-rounding) dimension scores."""
        B = self.structure()
        Phi = np.diag([self.psi, self.psa_var])
        return B @ Phi @ B.T + self.residual_cov()

    def implied_mean(self) -> np.ndarray:
        mu = np.asarray(self.intercepts, dtype=float).copy()
        mu[_PSA] += self.psa_mean
        return mu

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SyntheticPopulationParams":
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}
        return cls(**kw)


def discretize(x):
    """Round half up, then clamp to the 1..7 scale."""
    return np.clip(np.floor(np.asarray(x, dtype=float) + 0.5), LIKERT_MIN, LIKERT_MAX).astype(int)


def _factor(cov: np.ndarray) -> np.ndarray:
    """A matrix L with L L' = cov, valid for semidefinite cov."""
    w, V = np.linalg.eigh(cov)
    return V * np.sqrt(np.clip(w, 0.0, None))


def presets() -> dict[str, SyntheticPopulationParams]:
    base = SyntheticPopulationParams()
    flipped = tuple(-b for b in base.paths)
    return {
        "aligned": base,
        "reversed": replace(base, paths=flipped),
        "null": replace(base, paths=(0.0,) * 6),
    }


def degenerate_presets() -> dict[str, SyntheticPopulationParams]:
    """Populations whose responses collapse the sample covariance."""
    base = SyntheticPopulationParams()
    near_constant = replace(
        base,
        psi=1e-6,
        psa_var=1e-6,
        residual_sds=(1e-4,) * N_OBS,
        item_sd=0.0,
        intercepts=(5.0, 5.0, 5.0, 0.0, 3.0, 3.0, 3.0),
        psa_mean=5.0,
        allow_singular=True,
    )
    # Control repeats Awareness exactly: same loading, intercept and residual
    collinear = replace(
        base,
        loadings=(1.0, 1.0, 0.9),
        intercepts=(4.5, 4.5, 4.3, 0.0, 3.5, 3.2, 3.6),
        residual_sds=(0.6, 0.6, 0.55, 0.0, 0.6, 0.6, 0.6),
        indicator_residual_corr=(1.0, 0.0, 0.0),
        item_sd=0.0,
        allow_singular=True,
    )
    return {"near_constant": near_constant, "collinear": collinear}


def all_presets() -> dict[str, SyntheticPopulationParams]:
    return {**presets(), **degenerate_presets()}


@dataclass(frozen=True)
class SessionDraw:
    """Everything random about one synthetic session."""

    continuous: np.ndarray  # 7 dimension scores in OBSERVED_ORDER
    item_noise: dict[str, float]

    def item_score(self, item_id: str, dimension: str, item_sd: float) -> int:
        x = self.continuous[OBSERVED_ORDER.index(dimension)] + item_sd * self.item_noise[item_id]
        return int(discretize(x))


def draw_session(params: SyntheticPopulationParams, seed: int,
                 catalog: QuestionnaireCatalog | None = None) -> SessionDraw:
    """Traits and residuals for one session, then one noise draw per item in
    catalog order; a given seed always yields the same respondent."""
    catalog = catalog or load_catalog()
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(2 + N_OBS)
    eta = np.sqrt(params.psi) * z[0]
    t = params.psa_mean + np.sqrt(params.psa_var) * z[1]
    e = _factor(params.residual_cov()) @ z[2:]
    x = np.asarray(params.intercepts, dtype=float) + params.structure() @ np.array([eta, t]) + e
    for i in _OUT:
        x[i] -= params.structure()[i, 1] * params.psa_mean
    noise = rng.standard_normal(len(catalog.items))
    return SessionDraw(x, {item.id: float(v) for item, v in zip(catalog.items, noise)})


def sample_continuous(params: SyntheticPopulationParams, n: int, rng: np.random.Generator) -> np.ndarray:
    """Vectorized draw of ``n`` continuous dimension-score rows."""
    Z = rng.standard_normal((n, 2 + N_OBS))
    f = np.column_stack([np.sqrt(params.psi) * Z[:, 0], np.sqrt(params.psa_var) * Z[:, 1]])
    E = Z[:, 2:] @ _factor(params.residual_cov()).T
    return params.implied_mean() + f @ params.structure().T + E


def sample_observed(params: SyntheticPopulationParams, n: int, rng: np.random.Generator,
                    catalog: QuestionnaireCatalog | None = None) -> np.ndarray:
    """Vectorized draw of ``n`` rows of discretized dimension means, the
    quantity a completed session contributes to the SEM."""
    catalog = catalog or load_catalog()
    X = sample_continuous(params, n, rng)
    out = np.zeros_like(X)
    for j, dim in enumerate(OBSERVED_ORDER):
        k = sum(1 for item in catalog.items if item.dimension == dim)
        items = discretize(X[:, [j]] + params.item_sd * rng.standard_normal((n, k)))
        out[:, j] = items.mean(axis=1)
    return out


def simulate_rows(params: SyntheticPopulationParams, seeds: Sequence[int],
                  catalog: QuestionnaireCatalog | None = None) -> np.ndarray:
    """Observed rows exactly as complete protocol sessions with these seeds
    would produce them."""
    catalog = catalog or load_catalog()
    dims = {d: [i for i in catalog.items if i.dimension == d] for d in OBSERVED_ORDER}
    rows = np.zeros((len(seeds), N_OBS))
    for r, seed in enumerate(seeds):
        draw = draw_session(params, seed, catalog)
        for j, dim in enumerate(OBSERVED_ORDER):
            rows[r, j] = np.mean([draw.item_score(i.id, dim, params.item_sd) for i in dims[dim]])
    return rows


_ITEM_LINE = re.compile(r"^\s*([A-Za-z]+[0-9]+)\s*:\s+\S")


def prompt_item_ids(prompt: str) -> list[str]:
    return [m.group(1) for m in map(_ITEM_LINE.match, prompt.splitlines()) if m]


class SyntheticRespondent(_Base):
    """Answers every asked item from a latent-variable population.

    Traits are fixed by the seed, so the three steps of a session (all sent
    with the run seed) describe one coherent respondent.
    """

    def __init__(self, name: str, params: SyntheticPopulationParams,
                 catalog: QuestionnaireCatalog | None = None):
        self.name = name
        self.params = params
        self.catalog = catalog or load_catalog()

    def answer(self, prompt: str, temperature: float, seed: int) -> str:
        return synthetic_answer(self.params, prompt, seed, self.catalog)


def synthetic_answer(params: SyntheticPopulationParams, prompt: str, seed: int,
                     catalog: QuestionnaireCatalog | None = None) -> str:
    catalog = catalog or load_catalog()
    ids = prompt_item_ids(prompt)
    known = {item.id: item for item in catalog.items}
    unknown = [i for i in ids if i not in known]
    if unknown:
        raise SimError(f"prompt asks for item(s) not in the catalog: {', '.join(unknown)}")
    if not ids:
        raise SimError("prompt contains no item lines")
    draw = draw_session(params, seed, catalog)
    scores = {i: draw.item_score(i, known[i].dimension, params.item_sd) for i in ids}
    return format_scores(scores)


# ---------------------------------------------------------------------------
# configuration

BACKEND_KINDS = ("remote", "synthetic", "echo")


@dataclass
class BackendConfig:
    name: str
    kind: str
    endpoint: str | None = None
    auth_env: str | None = None
    headers: dict = field(default_factory=dict)
    request_template: dict | None = None
    response_path: str = DEFAULT_RESPONSE_PATH
    model: str | None = None
    params_file: str | None = None
    preset: str | None = None
    params: dict | None = None
    max_in_flight: int = 4
    timeout: float = 60.0

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "BackendConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown backend config key(s): {', '.join(sorted(extra))}")
        cfg = cls(**d)
        if cfg.kind not in BACKEND_KINDS:
            raise ValueError(f"backend {cfg.name!r}: kind must be one of {BACKEND_KINDS}")
        if cfg.kind == "remote" and not cfg.endpoint:
            raise ValueError(f"backend {cfg.name!r}: remote backends need an endpoint")
        return cfg

    def resolve_params(self, base_dir: Path | None = None) -> SyntheticPopulationParams:
        if self.params_file:
            path = Path(self.params_file)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            return SyntheticPopulationParams.from_dict(json.loads(path.read_text(encoding="utf-8")))
        if self.params:
            return SyntheticPopulationParams.from_dict(self.params)
        name = self.preset or "aligned"
        table = all_presets()
        if name not in table:
            raise ValueError(f"unknown preset {name!r}; choose from {', '.join(table)}")
        return table[name]


def make_backend(cfg: BackendConfig, base_dir: Path | None = None, catalog=None) -> RespondentBackend:
    if cfg.kind == "echo":
        return EchoBackend(cfg.name)
    if cfg.kind == "synthetic":
        return SyntheticRespondent(cfg.name, cfg.resolve_params(base_dir), catalog)
    return RemoteBackend(
        cfg.name,
        cfg.endpoint,
        auth_env=cfg.auth_env,
        headers=cfg.headers or None,
        request_template=cfg.request_template,
        response_path=cfg.response_path,
        model=cfg.model,
        timeout=cfg.timeout,
        max_in_flight=cfg.max_in_flight,
    )


__all__ = [
    "BackendError", "SimError", "RespondentBackend", "EchoBackend", "RemoteBackend",
    "SyntheticPopulationParams", "SyntheticRespondent", "discretize", "presets", "degenerate_presets",
    "all_presets", "draw_session", "sample_continuous", "sample_observed", "simulate_rows",
    "synthetic_answer", "prompt_item_ids", "BackendConfig", "make_backend",
]
