from __future__ import annotations

from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
import pytest
import yaml

from infra.config import ExperimentConfig, experimento_desde_dict
from logic.espacio import build_schema, encode_table
from logic.modelos import Dataset, LabelSpace


PRESUPUESTO_CHICO = {"max_iter_adam": 80, "max_iter_pso": 15, "particulas": 8, "paciencia": 5}


def blobs(n: int = 40, semilla: int = 0, separacion: float = 3.0, dimension: int = 2) -> pd.DataFrame:
    """Dos nubes gaussianas separadas, clases "a" y "b" alternadas."""
    rng = np.random.default_rng(semilla)
    y = np.arange(n) % 2
    X = rng.normal(size=(n, dimension)) * 0.5
    X[:, 0] += np.where(y == 1, separacion, -separacion) / 2
    df = pd.DataFrame(X, columns=[f"x{k}" for k in range(dimension)])
    df["clase"] = np.where(y == 1, "b", "a")
    return df


def dataset_de(tabla: pd.DataFrame, columna_clase: str = "clase", nombre: str = "d") -> Dataset:
    schema = build_schema(tabla, columna_clase)
    return encode_table(schema, tabla, LabelSpace(schema.clases), nombre=nombre)


@pytest.fixture
def escribir_csv(tmp_path: Path):
    def _escribir(nombre: str, df: pd.DataFrame) -> Path:
        path = tmp_path / nombre
        df.to_csv(path, index=False)
        return path
    return _escribir


@pytest.fixture
def experimento_yaml(tmp_path: Path):
    """Arma un experimento de participantes sobre trozos disjuntos de `blobs` y devuelve su ruta."""

    def _armar(modelos: list[dict[str, Any]], n: int = 120, semilla: int = 0, **extras: Any) -> Path:
        base = blobs(n + 60, semilla=semilla, separacion=2.0)
        prueba = base.iloc[n:]
        prueba.to_csv(tmp_path / "prueba.csv", index=False)
        trozos = np.array_split(np.arange(n), len(modelos))
        participantes = []
        for k, (modelo, filas) in enumerate(zip(modelos, trozos)):
            nombre = f"p{k}"
            base.iloc[filas].to_csv(tmp_path / f"{nombre}.csv", index=False)
            participantes.append({"nombre": nombre, "datos": f"{nombre}.csv", "modelo": modelo})
        data = {
            "columna_clase": "clase",
            "prueba": "prueba.csv",
            "salida": "reporte",
            "semilla": semilla,
            "lambda": {"politica": "fija", "valor": 8.0},
            "presupuesto": dict(PRESUPUESTO_CHICO),
            **extras,
            "participantes": participantes,
        }
        path = tmp_path / "experimento.yaml"
        path.write_text(yaml.safe_dump(data, sort_keys=False), encoding="utf-8")
        return path

    return _armar


@pytest.fixture
def experimento(experimento_yaml):
    def _config(modelos: list[dict[str, Any]], **kwargs: Any) -> ExperimentConfig:
        path = experimento_yaml(modelos, **kwargs)
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
        return experimento_desde_dict(data, path.parent)
    return _config
