from __future__ import annotations

import math
from collections import defaultdict
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from infra.logger import get_logger
from logic.aprendices import gradient, predict_label, predict_proba
from logic.espacio import project_matrix
from logic.modelos import (
    ClaveRegistro,
    CounterfactualRecord,
    CounterfactualTarget,
    Dataset,
    EntradaDelta,
    ExpertiseSet,
    FeatureMask,
    ObjectiveEvaluation,
    OptimizerBudget,
    Participante,
    TeachingSet,
    TrainedModel,
)
from logic.optimizacion import ErrorOptimizacion, adam_minimize, pso_minimize


log = get_logger("destilacion")


class ErrorMascara(ValueError):
    pass


# ==========================================================
# Identificacion de experticia (S_i) y conjuntos de ensenanza (R_i->j)
# ==========================================================
def identify_expertise(participante: Participante, datasets: Mapping[str, Dataset]) -> ExpertiseSet:
    """Instancias (dataset, índice) que el modelo predice correctamente."""
    modelo = participante.modelo
    correctas: set[tuple[str, int]] = set()
    for d_id, ds in datasets.items():
        if len(ds) == 0:
            continue
        if ds.label_space != modelo.label_space:
            raise ValueError(f"'{d_id}' y '{participante.nombre}' usan espacios de etiquetas distintos")
        X = project_matrix(ds.schema, participante.esquema, ds.X)
        aciertos = np.nonzero(predict_label(modelo, X) == ds.y)[0]
        correctas.update((d_id, int(i)) for i in aciertos)
    return ExpertiseSet(participante.nombre, frozenset(correctas))


def teaching_sets(expertise: Sequence[ExpertiseSet]) -> list[TeachingSet]:
    """R_{i->j} = S_i - S_j para cada par ordenado i != j."""
    out: list[TeachingSet] = []
    for i, si in enumerate(expertise):
        for j, sj in enumerate(expertise):
            if i == j:
                continue
            out.append(TeachingSet(si.modelo, sj.modelo, si.indices - sj.indices))
    return out


# ==========================================================
# Objetivo y generacion de contrafactuales
# ==========================================================
def make_target(teacher: TrainedModel, x: np.ndarray, y: int, alfa: float) -> CounterfactualTarget:
    """y' = f_i(x) + alfa * (y - f_i(x))."""
    if not 0.0 <= alfa <= 1.0:
        raise ValueError(f"alfa debe estar en [0, 1] (recibido {alfa})")
    f = predict_proba(teacher, x)
    etiqueta = teacher.label_space.one_hot(int(y))
    return CounterfactualTarget(y_prima=f + alfa * (etiqueta - f), alfa=alfa, prediccion=f, etiqueta=etiqueta)


def generate_counterfactual(
    teacher: TrainedModel,
    x: np.ndarray,
    target: CounterfactualTarget,
    lam: float,
    mask: FeatureMask | None,
    budget: OptimizerBudget,
    clave: ClaveRegistro,
    eps_fit: float = 1e-2,
) -> CounterfactualRecord | None:
    """argmin_{x'} |x' - x|_1 + lam * |f_i(x') - y'|^2 dentro de [0,1]^d.

    Adam si el maestro es diferenciable, PSO si no. Devuelve None si el
    optimizador falla (objetivo no finito).
    """
    if lam <= 0:
        raise ValueError("lambda debe ser > 0")
    x = np.asarray(x, dtype=float)
    yp = target.y_prima
    libres = mask.indices if mask is not None else None

    def ajuste(p: np.ndarray) -> tuple[float, np.ndarray]:
        r = p - yp
        return lam * float(r @ r), 2.0 * lam * r

    try:
        if teacher.diferenciable:
            def objetivo(z: np.ndarray) -> ObjectiveEvaluation:
                valor, _ = ajuste(predict_proba(teacher, z))
                g = gradient(teacher, z, ajuste) + np.sign(z - x)
                return ObjectiveEvaluation(float(np.abs(z - x).sum()) + valor, g)

            x_prima, _ = adam_minimize(objetivo, x, budget, mascara=libres)
        else:
            def objetivo_lote(Z: np.ndarray) -> np.ndarray:
                P = predict_proba(teacher, Z)
                return np.abs(Z - x).sum(axis=1) + lam * ((P - yp) ** 2).sum(axis=1)

            x_prima, _ = pso_minimize(objetivo_lote, x, budget, mascara=libres)
    except ErrorOptimizacion as e:
        log.warning("Contrafactual descartado %s: %s", clave, e)
        return None

    r = predict_proba(teacher, x_prima) - yp
    fit = float(r @ r)
    return CounterfactualRecord(
        maestro=clave.maestro,
        alumno=clave.alumno,
        dataset=clave.dataset,
        indice=clave.indice,
        x_prima=x_prima,
        y_prima=yp.copy(),
        etiqueta=target.clase,
        ajuste=fit,
        distancia=float(np.abs(x_prima - x).sum()),
        convergio=fit <= eps_fit,
        x_origen=x.copy(),
    )


def derive_mask(dataset: Dataset, clase: int, fraccion: float) -> FeatureMask:
    """Los ceil(fraccion * d) atributos de mayor varianza dentro de la clase."""
    if not 0.0 < fraccion <= 1.0:
        raise ErrorMascara(f"La fracción debe estar en (0, 1] (recibido {fraccion})")
    Xc = dataset.X[dataset.y == clase]
    if len(Xc) == 0:
        raise ErrorMascara(f"La clase {clase} no está en '{dataset.nombre}'")
    if len(Xc) < 2:
        raise ErrorMascara(f"La clase {clase} tiene una sola instancia en '{dataset.nombre}'")
    d = Xc.shape[1]
    varianza = Xc.var(axis=0)
    k = max(1, math.ceil(fraccion * d - 1e-9))
    orden = np.lexsort((np.arange(d), -varianza))
    return FeatureMask(tuple(sorted(int(i) for i in orden[:k])), fraccion)


# ==========================================================
# Deduplicacion por cobertura geometrica
# ==========================================================
def _cobertura_greedy(X: np.ndarray, radio: float) -> list[int]:
    n = len(X)
    cubre = np.zeros((n, n), dtype=bool)
    for i in range(n):
        cubre[i] = np.abs(X - X[i]).sum(axis=1) <= radio
    sin_cubrir = np.ones(n, dtype=bool)
    cuenta = cubre.sum(axis=1)
    elegidos: list[int] = []
    while sin_cubrir.any():
        i = int(np.argmax(cuenta))
        nuevos = cubre[i] & sin_cubrir
        elegidos.append(i)
        sin_cubrir &= ~nuevos
        cuenta -= cubre[:, nuevos].sum(axis=1)
    return sorted(elegidos)


def dedup_set_cover(registros: Sequence[CounterfactualRecord], radio: float) -> list[CounterfactualRecord]:
    """Cobertura geométrica greedy (bolas Manhattan de radio `radio`) por (alumno, clase)."""
    if radio < 0:
        raise ValueError("El radio de cobertura debe ser >= 0")
    grupos: dict[tuple[str, int], list[int]] = defaultdict(list)
    for k, r in enumerate(registros):
        grupos[(r.alumno, r.etiqueta)].append(k)

    conservar: set[int] = set()
    for idx in grupos.values():
        X = np.array([registros[k].x_prima for k in idx])
        conservar.update(idx[e] for e in _cobertura_greedy(X, radio))
    return [r for k, r in enumerate(registros) if k in conservar]


# ==========================================================
# Analisis de mecanismo (delta+ / delta-)
# ==========================================================
class AcumuladorDelta:
    """Sumas parciales de x' - x por (maestro, alumno, clase); combinables entre sitios."""

    def __init__(self, clases: Sequence[str]):
        self.clases = tuple(clases)
        self._sumas: dict[tuple[str, str], np.ndarray] = {}
        self._conteos: dict[tuple[str, str], np.ndarray] = {}

    def agregar(self, registro: CounterfactualRecord) -> None:
        if registro.x_origen is None:
            raise ValueError("El registro no trae la instancia de origen (solo disponible en su sitio)")
        par = (registro.maestro, registro.alumno)
        delta = registro.x_prima - registro.x_origen
        if par not in self._sumas:
            self._sumas[par] = np.zeros((len(self.clases), delta.size))
            self._conteos[par] = np.zeros(len(self.clases), dtype=int)
        self._sumas[par][registro.etiqueta] += delta
        self._conteos[par][registro.etiqueta] += 1

    def combinar(self, otro: "AcumuladorDelta") -> None:
        for par, suma in otro._sumas.items():
            if par in self._sumas:
                self._sumas[par] = self._sumas[par] + suma
                self._conteos[par] = self._conteos[par] + otro._conteos[par]
            else:
                self._sumas[par] = suma.copy()
                self._conteos[par] = otro._conteos[par].copy()

    def como_dict(self) -> dict[str, Any]:
        return {
            "clases": list(self.clases),
            "pares": [
                {"maestro": m, "alumno": a, "sumas": self._sumas[(m, a)].tolist(),
                 "conteos": self._conteos[(m, a)].tolist()}
                for (m, a) in self._sumas
            ],
        }

    @classmethod
    def desde_dict(cls, data: Mapping[str, Any]) -> "AcumuladorDelta":
        acc = cls(data["clases"])
        for p in data["pares"]:
            acc._sumas[(p["maestro"], p["alumno"])] = np.array(p["sumas"], dtype=float)
            acc._conteos[(p["maestro"], p["alumno"])] = np.array(p["conteos"], dtype=int)
        return acc

    def resultado(self, orden: Sequence[str] | None = None) -> tuple[EntradaDelta, ...]:
        pos = {n: k for k, n in enumerate(orden or ())}
        pares = sorted(self._sumas, key=lambda p: (pos.get(p[0], len(pos)), pos.get(p[1], len(pos)), p))
        out = []
        for par in pares:
            suma, n = self._sumas[par], self._conteos[par]
            medias = np.where(n[:, None] > 0, suma / np.maximum(n, 1)[:, None], 0.0)
            out.append(EntradaDelta(
                maestro=par[0],
                alumno=par[1],
                clases=self.clases,
                medias=medias,
                conteos=tuple(int(c) for c in n),
                vacias=tuple(bool(c == 0) for c in n),
                diferencia=medias[1] - medias[0] if len(self.clases) == 2 else None,
            ))
        return tuple(out)


def mechanism_report(
    registros: Iterable[CounterfactualRecord],
    clases: Sequence[str],
    orden: Sequence[str] | None = None,
) -> tuple[EntradaDelta, ...]:
    """delta por clase (y delta+ - delta- en binario) para cada par (maestro, alumno)."""
    acc = AcumuladorDelta(clases)
    vacio = True
    for r in registros:
        acc.agregar(r)
        vacio = False
    if vacio:
        raise ValueError("mechanism_report necesita al menos un registro")
    return acc.resultado(orden)


def ordenar_registros(
    registros: Iterable[CounterfactualRecord],
    participantes: Sequence[str],
    datasets: Sequence[str],
) -> list[CounterfactualRecord]:
    """Orden canónico (maestro, alumno, dataset, índice) según las posiciones de configuración."""
    pp = {n: k for k, n in enumerate(participantes)}
    pd_ = {n: k for k, n in enumerate(datasets)}
    return sorted(registros, key=lambda r: (pp[r.maestro], pp[r.alumno], pd_[r.dataset], r.indice))
