from __future__ import annotations

from types import MappingProxyType
from typing import Callable, Mapping

import numpy as np

from infra.logger import get_logger
from logic.modelos import Dataset, LabelSpace, ModelSpec, TrainedModel, congelar


log = get_logger("aprendices")

# (valor, d valor / d p) para un vector de probabilidades p
ObjetivoProba = Callable[[np.ndarray], tuple[float, np.ndarray]]

DIFERENCIABLES = ("mlp", "linear-svm")


class ErrorDimension(ValueError):
    pass


class ErrorEntrenamiento(ValueError):
    pass


def _sigmoide(z: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -z))


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def construir_modelo(
    spec: ModelSpec,
    parametros: Mapping[str, np.ndarray],
    label_space: LabelSpace,
    dimension: int,
) -> TrainedModel:
    """Arma un TrainedModel inmutable a partir de parámetros explícitos."""
    params = MappingProxyType({k: congelar(v) for k, v in parametros.items()})
    return TrainedModel(
        spec=spec,
        parametros=params,
        label_space=label_space,
        dimension=int(dimension),
        diferenciable=spec.tipo in DIFERENCIABLES,
    )


# ==========================================================
# Contrato
# ==========================================================
def fit(spec: ModelSpec, data: Dataset) -> TrainedModel:
    return fit_arrays(spec, data.X, data.y, data.label_space)


def fit_arrays(spec: ModelSpec, X: np.ndarray, y: np.ndarray, label_space: LabelSpace) -> TrainedModel:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ErrorEntrenamiento("Se necesitan datos no vacíos (matriz filas x atributos).")
    if y.shape != (X.shape[0],):
        raise ErrorDimension(f"{X.shape[0]} filas pero {y.shape[0]} etiquetas")
    C = label_space.n
    if y.min() < 0 or y.max() >= C:
        raise ErrorEntrenamiento("Etiquetas fuera del espacio de etiquetas.")
    if spec.tipo in ("decision-tree", "linear-svm") and np.unique(y).size < 2:
        clase = label_space.classes[int(y[0])]
        raise ErrorEntrenamiento(
            f"{spec.tipo} requiere al menos 2 clases en los datos (solo hay '{clase}')"
        )

    entrenar = {
        "mlp": _fit_mlp,
        "decision-tree": _fit_arbol,
        "gaussian-nb": _fit_nb,
        "linear-svm": _fit_svm,
    }[spec.tipo]
    params = entrenar(spec, X, y, C)
    log.debug("Entrenado %s sobre %d instancias (dimension %d)", spec.tipo, X.shape[0], X.shape[1])
    return construir_modelo(spec, params, label_space, X.shape[1])


def _validar_entrada(model: TrainedModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.dimension or x.ndim not in (1, 2):
        raise ErrorDimension(f"El modelo espera dimension {model.dimension}, recibió {x.shape}")
    return x


def predict_proba(model: TrainedModel, x: np.ndarray) -> np.ndarray:
    """Probabilidades por clase; acepta un vector (C,) o un lote (n, C)."""
    x = _validar_entrada(model, x)
    X = np.atleast_2d(x)
    calcular = {
        "mlp": _proba_mlp,
        "decision-tree": _proba_arbol,
        "gaussian-nb": _proba_nb,
        "linear-svm": _proba_svm,
    }[model.spec.tipo]
    P = calcular(model, X)
    return P[0] if x.ndim == 1 else P


def predict_label(model: TrainedModel, x: np.ndarray) -> np.ndarray | int:
    """argmax de predict_proba; en empates gana el menor índice de clase."""
    P = predict_proba(model, x)
    if P.ndim == 1:
        return int(np.argmax(P))
    return np.argmax(P, axis=1)


def gradient(model: TrainedModel, x: np.ndarray, objetivo: ObjetivoProba) -> np.ndarray | None:
    """Gradiente de objetivo(predict_proba(x)) respecto de x; None si el modelo no es diferenciable."""
    if not model.diferenciable:
        return None
    x = _validar_entrada(model, x)
    if x.ndim != 1:
        raise ErrorDimension("gradient trabaja sobre un único vector")
    if model.spec.tipo == "mlp":
        return _grad_mlp(model, x, objetivo)
    return _grad_svm(model, x, objetivo)


# ==========================================================
# Perceptron multicapa
# ==========================================================
def _capas(params: Mapping[str, np.ndarray]) -> list[tuple[np.ndarray, np.ndarray]]:
    n = len(params) // 2
    return [(params[f"W{i}"], params[f"b{i}"]) for i in range(n)]


def _mlp_adelante(capas, X: np.ndarray, pendiente: float):
    pre, activ = [], [X]
    h = X
    for W, b in capas[:-1]:
        z = h @ W + b
        pre.append(z)
        h = np.where(z > 0, z, pendiente * z)
        activ.append(h)
    W, b = capas[-1]
    return h @ W + b, pre, activ


def _mlp_salida(z: np.ndarray, C: int) -> np.ndarray:
    if C == 2:
        s = _sigmoide(z[:, 0])
        return np.column_stack([1.0 - s, s])
    return _softmax(z)


def _proba_mlp(model: TrainedModel, X: np.ndarray) -> np.ndarray:
    z, _, _ = _mlp_adelante(_capas(model.parametros), X, model.spec.pendiente_negativa)
    return _mlp_salida(z, model.label_space.n)


def _grad_mlp(model: TrainedModel, x: np.ndarray, objetivo: ObjetivoProba) -> np.ndarray:
    capas = _capas(model.parametros)
    pendiente = model.spec.pendiente_negativa
    C = model.label_space.n
    z, pre, _ = _mlp_adelante(capas, x[None, :], pendiente)
    p = _mlp_salida(z, C)[0]
    _, g = objetivo(p)
    g = np.asarray(g, dtype=float)

    if C == 2:
        delta = np.array([[(g[1] - g[0]) * p[1] * p[0]]])
    else:
        delta = (p * (g - g @ p))[None, :]

    for l in range(len(capas) - 1, -1, -1):
        dh = delta @ capas[l][0].T
        if l == 0:
            return dh[0]
        delta = dh * np.where(pre[l - 1] > 0, 1.0, pendiente)
    raise AssertionError("sin capas")


def _fit_mlp(spec: ModelSpec, X: np.ndarray, y: np.ndarray, C: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(spec.semilla)
    n, d = X.shape
    salida = 1 if C == 2 else C
    tam = [d, *spec.capas_ocultas, salida]
    params: dict[str, np.ndarray] = {}
    for i, (a, b) in enumerate(zip(tam[:-1], tam[1:])):
        params[f"W{i}"] = rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b))
        params[f"b{i}"] = np.zeros(b)

    # --- Particion de validacion para el corte temprano ---
    orden = rng.permutation(n)
    n_val = int(round(spec.fraccion_validacion * n))
    if n_val < 1 or n - n_val < 1:
        n_val = 0
    idx_val, idx_tr = orden[:n_val], orden[n_val:]
    X_tr, y_tr = X[idx_tr], y[idx_tr]
    X_val, y_val = (X[idx_val], y[idx_val]) if n_val else (X_tr, y_tr)

    def perdida(Xb, yb) -> float:
        z, _, _ = _mlp_adelante(_capas(params), Xb, spec.pendiente_negativa)
        P = _mlp_salida(z, C)
        return float(-np.mean(np.log(np.clip(P[np.arange(len(yb)), yb], 1e-300, None))))

    m = {k: np.zeros_like(w) for k, w in params.items()}
    v = {k: np.zeros_like(w) for k, w in params.items()}
    b1, b2, eps = 0.9, 0.999, 1e-8
    t = 0
    mejor, mejor_params, sin_mejora = np.inf, {k: w.copy() for k, w in params.items()}, 0

    for _ in range(spec.epocas):
        perm = rng.permutation(len(X_tr))
        for ini in range(0, len(perm), spec.tam_lote):
            lote = perm[ini:ini + spec.tam_lote]
            Xb, yb = X_tr[lote], y_tr[lote]
            capas = _capas(params)
            z, pre, activ = _mlp_adelante(capas, Xb, spec.pendiente_negativa)
            if C == 2:
                delta = (_sigmoide(z[:, 0]) - yb)[:, None]
            else:
                delta = _softmax(z)
                delta[np.arange(len(yb)), yb] -= 1.0
            delta /= len(yb)

            grads: dict[str, np.ndarray] = {}
            for l in range(len(capas) - 1, -1, -1):
                grads[f"W{l}"] = activ[l].T @ delta
                grads[f"b{l}"] = delta.sum(axis=0)
                if l > 0:
                    delta = (delta @ capas[l][0].T) * np.where(pre[l - 1] > 0, 1.0, spec.pendiente_negativa)

            t += 1
            for k, g in grads.items():
                m[k] = b1 * m[k] + (1 - b1) * g
                v[k] = b2 * v[k] + (1 - b2) * g * g
                m_hat = m[k] / (1 - b1 ** t)
                v_hat = v[k] / (1 - b2 ** t)
                params[k] = params[k] - spec.tasa_aprendizaje * m_hat / (np.sqrt(v_hat) + eps)

        actual = perdida(X_val, y_val)
        if actual < mejor - 1e-12:
            mejor, sin_mejora = actual, 0
            mejor_params = {k: w.copy() for k, w in params.items()}
        else:
            sin_mejora += 1
            if sin_mejora >= spec.paciencia:
                break

    return mejor_params


# ==========================================================
# Arbol de decision (CART, gini)
# ==========================================================
def _gini(conteos: np.ndarray) -> float:
    n = conteos.sum()
    return 1.0 - float(((conteos / n) ** 2).sum())


def _mejor_corte(X: np.ndarray, Y: np.ndarray, min_hoja: int) -> tuple[int, float] | None:
    """(atributo, umbral) que más reduce la impureza ponderada, o None."""
    n, d = X.shape
    base = _gini(Y.sum(axis=0))
    mejor_imp, mejor = base - 1e-12, None
    posiciones = np.arange(min_hoja - 1, n - min_hoja)
    if posiciones.size == 0:
        return None

    for f in range(d):
        orden = np.argsort(X[:, f], kind="stable")
        xs = X[orden, f]
        acum = np.cumsum(Y[orden], axis=0)
        i = posiciones[xs[posiciones] < xs[posiciones + 1]]
        if i.size == 0:
            continue
        izq = acum[i]
        der = acum[-1] - izq
        nl = (i + 1).astype(float)
        nr = n - nl
        gl = 1.0 - ((izq / nl[:, None]) ** 2).sum(axis=1)
        gr = 1.0 - ((der / nr[:, None]) ** 2).sum(axis=1)
        imp = (nl * gl + nr * gr) / n
        k = int(np.argmin(imp))
        if imp[k] < mejor_imp:
            mejor_imp = float(imp[k])
            mejor = (f, float(xs[i[k]] + (xs[i[k] + 1] - xs[i[k]]) / 2.0))
    return mejor


def _fit_arbol(spec: ModelSpec, X: np.ndarray, y: np.ndarray, C: int) -> dict[str, np.ndarray]:
    Y = np.eye(C)[y]
    atributo: list[int] = []
    umbral: list[float] = []
    izquierda: list[int] = []
    derecha: list[int] = []
    conteos: list[np.ndarray] = []

    def nuevo_nodo(idx: np.ndarray) -> int:
        atributo.append(-1)
        umbral.append(0.0)
        izquierda.append(-1)
        derecha.append(-1)
        conteos.append(Y[idx].sum(axis=0))
        return len(atributo) - 1

    pila = [(nuevo_nodo(np.arange(len(y))), np.arange(len(y)), 0)]
    while pila:
        nodo, idx, prof = pila.pop()
        if (
            len(idx) < 2 * spec.min_muestras_hoja
            or (spec.profundidad_max is not None and prof >= spec.profundidad_max)
            or np.count_nonzero(conteos[nodo]) <= 1
        ):
            continue
        corte = _mejor_corte(X[idx], Y[idx], spec.min_muestras_hoja)
        if corte is None:
            continue
        f, u = corte
        va = X[idx, f] <= u
        izq, der = nuevo_nodo(idx[va]), nuevo_nodo(idx[~va])
        atributo[nodo], umbral[nodo] = f, u
        izquierda[nodo], derecha[nodo] = izq, der
        # derecha primero para que la izquierda se expanda antes (orden preorden)
        pila.append((der, idx[~va], prof + 1))
        pila.append((izq, idx[va], prof + 1))

    return {
        "atributo": np.array(atributo, dtype=float),
        "umbral": np.array(umbral),
        "izquierda": np.array(izquierda, dtype=float),
        "derecha": np.array(derecha, dtype=float),
        "conteos": np.array(conteos),
    }


def _hojas(model: TrainedModel, X: np.ndarray) -> np.ndarray:
    p = model.parametros
    atributo = p["atributo"].astype(int)
    izq, der = p["izquierda"].astype(int), p["derecha"].astype(int)
    umbral = p["umbral"]
    nodo = np.zeros(X.shape[0], dtype=int)
    while True:
        activos = np.nonzero(atributo[nodo] >= 0)[0]
        if activos.size == 0:
            return nodo
        actual = nodo[activos]
        va = X[activos, atributo[actual]] <= umbral[actual]
        nodo[activos] = np.where(va, izq[actual], der[actual])


def _proba_arbol(model: TrainedModel, X: np.ndarray) -> np.ndarray:
    conteos = model.parametros["conteos"][_hojas(model, X)]
    alfa = model.spec.suavizado_laplace
    C = model.label_space.n
    return (conteos + alfa) / (conteos.sum(axis=1, keepdims=True) + alfa * C)


# ==========================================================
# Naive Bayes gaussiano
# ==========================================================
def _fit_nb(spec: ModelSpec, X: np.ndarray, y: np.ndarray, C: int) -> dict[str, np.ndarray]:
    d = X.shape[1]
    eps = 1e-9 * max(float(X.var(axis=0).max()), 1e-3)
    medias = np.zeros((C, d))
    varianzas = np.ones((C, d))
    log_prior = np.full(C, -np.inf)
    for k in range(C):
        Xk = X[y == k]
        if len(Xk) == 0:
            continue
        medias[k] = Xk.mean(axis=0)
        varianzas[k] = Xk.var(axis=0) + eps
        log_prior[k] = np.log(len(Xk) / len(X))
    return {"medias": medias, "varianzas": varianzas, "log_prior": log_prior}


def _proba_nb(model: TrainedModel, X: np.ndarray) -> np.ndarray:
    p = model.parametros
    mu, var, lp = p["medias"], p["varianzas"], p["log_prior"]
    dif = X[:, None, :] - mu[None, :, :]
    jll = -0.5 * (np.log(2.0 * np.pi * var)[None] + dif * dif / var[None]).sum(axis=2)
    jll = jll + lp[None, :]            # clases ausentes: -inf
    jll = jll - jll.max(axis=1, keepdims=True)
    e = np.exp(jll)
    return e / e.sum(axis=1, keepdims=True)


# ==========================================================
# SVM lineal (hinge cuadrado) con calibracion logistica
# ==========================================================
def _svm_binario(X: np.ndarray, t: np.ndarray, reg: float) -> tuple[np.ndarray, float]:
    """Newton primal para 0.5*reg*|w|^2 + mean(max(0, 1 - t(w.x+b))^2)."""
    n, d = X.shape
    Xa = np.hstack([X, np.ones((n, 1))])
    R = np.eye(d + 1) * reg
    R[-1, -1] = 1e-8
    w = np.zeros(d + 1)

    def perdida(w: np.ndarray) -> float:
        m = np.maximum(1.0 - t * (Xa @ w), 0.0)
        return 0.5 * float(w @ R @ w) + float((m * m).sum()) / n

    for _ in range(100):
        m = 1.0 - t * (Xa @ w)
        act = m > 0
        grad = R @ w - (2.0 / n) * Xa[act].T @ (t[act] * m[act])
        if np.linalg.norm(grad) < 1e-10:
            break
        H = R + (2.0 / n) * Xa[act].T @ Xa[act]
        paso = np.linalg.solve(H, grad)
        actual, s = perdida(w), 1.0
        while perdida(w - s * paso) > actual - 1e-4 * s * float(grad @ paso) and s > 1e-10:
            s /= 2.0
        w = w - s * paso
    return w[:-1], float(w[-1])


def _platt(margen: np.ndarray, positivo: np.ndarray) -> tuple[float, float]:
    """Ajusta p = sigmoide(a*margen + c) por Newton con objetivos suavizados."""
    n_pos = int(positivo.sum())
    n_neg = len(positivo) - n_pos
    t = np.where(positivo, (n_pos + 1.0) / (n_pos + 2.0), 1.0 / (n_neg + 2.0))
    a, c = 0.0, float(np.log((n_pos + 1.0) / (n_neg + 1.0)))

    def perdida(a: float, c: float) -> float:
        z = a * margen + c
        return float((np.logaddexp(0.0, z) - t * z).sum())

    for _ in range(100):
        p = _sigmoide(a * margen + c)
        r = p - t
        g = np.array([(r * margen).sum(), r.sum()])
        if np.abs(g).max() < 1e-10:
            break
        w = p * (1.0 - p)
        H = np.array([[(w * margen * margen).sum(), (w * margen).sum()], [(w * margen).sum(), w.sum()]])
        paso = np.linalg.solve(H + 1e-12 * np.eye(2), g)
        actual, s = perdida(a, c), 1.0
        while perdida(a - s * paso[0], c - s * paso[1]) > actual - 1e-4 * s * float(g @ paso) and s > 1e-10:
            s /= 2.0
        a, c = a - s * float(paso[0]), c - s * float(paso[1])
    return a, c


def _fit_svm(spec: ModelSpec, X: np.ndarray, y: np.ndarray, C: int) -> dict[str, np.ndarray]:
    objetivos = [1] if C == 2 else list(range(C))
    W, b, a, c = [], [], [], []
    for k in objetivos:
        positivo = y == k
        t = np.where(positivo, 1.0, -1.0)
        wk, bk = _svm_binario(X, t, spec.regularizacion)
        W.append(wk)
        b.append(bk)
        if spec.calibrar:
            ak, ck = _platt(X @ wk + bk, positivo)
        else:
            ak, ck = 1.0, 0.0
        a.append(ak)
        c.append(ck)
    return {"W": np.array(W), "b": np.array(b), "a": np.array(a), "c": np.array(c)}


def _svm_sigmoides(model: TrainedModel, X: np.ndarray) -> np.ndarray:
    p = model.parametros
    margen = X @ p["W"].T + p["b"]
    return _sigmoide(p["a"] * margen + p["c"])


def _proba_svm(model: TrainedModel, X: np.ndarray) -> np.ndarray:
    s = _svm_sigmoides(model, X)
    if model.label_space.n == 2:
        return np.column_stack([1.0 - s[:, 0], s[:, 0]])
    return s / s.sum(axis=1, keepdims=True)


def _grad_svm(model: TrainedModel, x: np.ndarray, objetivo: ObjetivoProba) -> np.ndarray:
    p = model.parametros
    s = _svm_sigmoides(model, x[None, :])[0]
    P = _proba_svm(model, x[None, :])[0]
    _, g = objetivo(P)
    g = np.asarray(g, dtype=float)
    ds = s * (1.0 - s) * p["a"]              # d s_k / d margen_k
    if model.label_space.n == 2:
        return (g[1] - g[0]) * ds[0] * p["W"][0]
    coef = (g - g @ P) / s.sum() * ds
    return coef @ p["W"]
