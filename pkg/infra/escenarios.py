from __future__ import annotations

import math
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import pandas as pd
import yaml

from infra.export import escribir_atomico
from infra.logger import get_logger
from logic.espacio import como_categoria, ordenar_clases


log = get_logger("escenarios")

ESCENARIOS = ("undersample-split", "random-feature-drop")


class ErrorEscenario(ValueError):
    pass


def _clases(tabla: pd.DataFrame, columna_clase: str) -> tuple[pd.Series, tuple[str, ...]]:
    if columna_clase not in tabla.columns:
        raise ErrorEscenario(f"No existe la columna de clase '{columna_clase}'")
    etiquetas = tabla[columna_clase].map(como_categoria)
    return etiquetas, ordenar_clases(c for c in etiquetas if c is not None)


def _techo(x: float) -> int:
    # evita que 0.05 * 20 = 1.0000000000000009 se redondee a 2
    return math.ceil(round(x, 9))


# ==========================================================
# Datos base
# ==========================================================
def mezcla_gaussiana(
    n: int,
    dimension: int = 8,
    clases: int = 4,
    separacion: float = 1.5,
    semilla: int = 0,
    columna_clase: str = "clase",
) -> pd.DataFrame:
    """Mezcla de gaussianas isotrópicas, clases balanceadas y centros aleatorios."""
    if n < clases or dimension < 1 or clases < 2:
        raise ErrorEscenario("Se necesitan n >= clases, dimension >= 1 y clases >= 2")
    rng = np.random.default_rng(semilla)
    centros = rng.normal(0.0, separacion, size=(clases, dimension))
    y = np.arange(n) % clases
    X = centros[y] + rng.normal(size=(n, dimension))
    perm = rng.permutation(n)
    df = pd.DataFrame(X[perm], columns=[f"x{k}" for k in range(dimension)])
    df[columna_clase] = [f"c{k}" for k in y[perm]]
    return df


def separar_prueba(
    tabla: pd.DataFrame, columna_clase: str, fraccion: float, semilla: int = 0
) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Separación estratificada: (entrenamiento, prueba)."""
    if not 0.0 < fraccion < 1.0:
        raise ErrorEscenario(f"La fracción de prueba debe estar en (0, 1) (recibido {fraccion})")
    etiquetas, clases = _clases(tabla, columna_clase)
    rng = np.random.default_rng(semilla)
    prueba: list[int] = []
    for c in clases:
        idx = np.flatnonzero((etiquetas == c).to_numpy())
        rng.shuffle(idx)
        prueba.extend(idx[: int(round(fraccion * len(idx)))].tolist())
    en_prueba = np.zeros(len(tabla), dtype=bool)
    en_prueba[prueba] = True
    return tabla.loc[~en_prueba].reset_index(drop=True), tabla.loc[en_prueba].reset_index(drop=True)


# ==========================================================
# Escenarios
# ==========================================================
def undersample_split(
    tabla: pd.DataFrame,
    columna_clase: str,
    k: int,
    tasa: float = 0.95,
    semilla: int = 0,
) -> list[pd.DataFrame]:
    """k particiones estratificadas; la p-ésima conserva ceil((1 - tasa) n) filas de la clase p."""
    etiquetas, clases = _clases(tabla, columna_clase)
    if k < 2:
        raise ErrorEscenario("undersample-split necesita k >= 2")
    if k > len(clases):
        raise ErrorEscenario(f"k={k} supera la cantidad de clases ({len(clases)})")
    if not 0.0 <= tasa < 1.0:
        raise ErrorEscenario(f"La tasa debe estar en [0, 1) (recibido {tasa})")

    rng = np.random.default_rng(semilla)
    partes: list[list[int]] = [[] for _ in range(k)]
    for c in clases:
        idx = np.flatnonzero((etiquetas == c).to_numpy())
        rng.shuffle(idx)
        for p, trozo in enumerate(np.array_split(idx, k)):
            if c == clases[p]:
                trozo = trozo[: _techo((1.0 - tasa) * len(trozo))]
            partes[p].extend(trozo.tolist())
    out = [tabla.iloc[sorted(p)].reset_index(drop=True) for p in partes]
    for p, df in enumerate(out):
        log.info("Partición %d: %d filas, clase '%s' submuestreada", p, len(df), clases[p])
    return out


def random_feature_drop(
    tabla: pd.DataFrame,
    columna_clase: str,
    compartidas: int,
    fracciones: Sequence[float] = (0.4, 0.4, 0.2),
    semilla: int = 0,
) -> tuple[pd.DataFrame, pd.DataFrame, pd.DataFrame]:
    """Dos subconjuntos disjuntos que comparten exactamente `compartidas` atributos, más la prueba.

    Cada atributo no compartido se quita, al azar, de uno de los dos subconjuntos.
    """
    _clases(tabla, columna_clase)
    atributos = [c for c in tabla.columns if c != columna_clase]
    if not 2 <= compartidas <= len(atributos):
        raise ErrorEscenario(f"compartidas debe estar en [2, {len(atributos)}] (recibido {compartidas})")
    if len(fracciones) != 3 or any(f <= 0 for f in fracciones):
        raise ErrorEscenario("Se esperan tres fracciones positivas (a, b, prueba)")

    rng = np.random.default_rng(semilla)
    perm = rng.permutation(len(tabla))
    total = float(sum(fracciones))
    cortes = np.cumsum([int(round(len(tabla) * f / total)) for f in fracciones[:2]])
    filas_a, filas_b, filas_p = np.split(perm, cortes)

    orden = rng.permutation(len(atributos))
    comunes = {atributos[i] for i in orden[:compartidas]}
    resto = [atributos[i] for i in orden[compartidas:]]
    quitar_de_a = rng.uniform(size=len(resto)) < 0.5
    solo_b = {c for c, q in zip(resto, quitar_de_a) if q}
    solo_a = set(resto) - solo_b

    cols_a = [c for c in atributos if c in comunes or c in solo_a] + [columna_clase]
    cols_b = [c for c in atributos if c in comunes or c in solo_b] + [columna_clase]
    a = tabla.iloc[np.sort(filas_a)][cols_a].reset_index(drop=True)
    b = tabla.iloc[np.sort(filas_b)][cols_b].reset_index(drop=True)
    prueba = tabla.iloc[np.sort(filas_p)].reset_index(drop=True)
    log.info("Atributos: %d compartidos, %d solo en A, %d solo en B", len(comunes), len(solo_a), len(solo_b))
    return a, b, prueba


# ==========================================================
# Escritura
# ==========================================================
def _csv(df: pd.DataFrame) -> str:
    return df.to_csv(index=False, lineterminator="\n")


def escribir_escenario(
    directorio: str | Path,
    partes: Mapping[str, pd.DataFrame],
    prueba: pd.DataFrame,
    columna_clase: str,
    modelo: Mapping[str, Any],
    categoricas: Sequence[str] = (),
    extras: Mapping[str, Any] | None = None,
) -> Path:
    """Escribe un CSV por participante, la prueba y un experimento listo para `distill`."""
    directorio = Path(directorio)
    participantes = []
    for nombre, df in partes.items():
        escribir_atomico(directorio / f"{nombre}.csv", _csv(df))
        p: dict[str, Any] = {"nombre": nombre, "datos": f"{nombre}.csv", "modelo": dict(modelo)}
        cats = [c for c in categoricas if c in df.columns]
        if cats:
            p["categoricas"] = cats
        participantes.append(p)
    escribir_atomico(directorio / "prueba.csv", _csv(prueba))

    experimento: dict[str, Any] = {
        "modo": "shared-data",
        "columna_clase": columna_clase,
        "prueba": "prueba.csv",
        "salida": "reporte",
        **dict(extras or {}),
        "participantes": participantes,
    }
    texto = yaml.safe_dump(experimento, sort_keys=False, allow_unicode=True)
    return escribir_atomico(directorio / "experimento.yaml", texto)
