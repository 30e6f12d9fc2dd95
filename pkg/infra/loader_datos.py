from __future__ import annotations

from pathlib import Path
from typing import Any, Mapping

import pandas as pd
import yaml

from infra.config import load_config
from logic.modelos import ColumnSchema, DatasetSchema, FeatureMask, ModelSpec


_CONFIG = load_config()


def _limpiar_encabezados(df: pd.DataFrame) -> pd.DataFrame:
    df.columns = [str(c).strip().lstrip("\ufeff") for c in df.columns]
    return df


def leer_csv(path: str | Path) -> pd.DataFrame:
    """Lee un CSV con encabezado probando los encodings y separadores configurados.

    Se queda con la primera combinación que produce más de una columna.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"No existe el archivo {path}")
    for enc in _CONFIG.lectura.csv_encodings:
        for sep in _CONFIG.lectura.csv_separadores:
            try:
                df = pd.read_csv(path, encoding=enc, sep=sep)
            except (UnicodeDecodeError, pd.errors.ParserError, pd.errors.EmptyDataError):
                continue
            if df.shape[1] > 1:
                return _limpiar_encabezados(df)
    raise ValueError(f"No se pudo leer {path} con los encodings/separadores configurados")


# ==========================================================
# Esquemas
# ==========================================================
def esquema_a_dict(schema: DatasetSchema) -> dict[str, Any]:
    columnas = []
    for c in schema.columnas:
        if c.tipo == "continuous":
            columnas.append({"nombre": c.nombre, "tipo": c.tipo, "minimo": c.minimo, "maximo": c.maximo})
        else:
            columnas.append({"nombre": c.nombre, "tipo": c.tipo, "categorias": list(c.categorias)})
    return {"columna_clase": schema.columna_clase, "clases": list(schema.clases), "columnas": columnas}


def esquema_desde_dict(data: Mapping[str, Any]) -> DatasetSchema:
    try:
        columnas = tuple(
            ColumnSchema(
                nombre=str(c["nombre"]),
                tipo=c["tipo"],
                minimo=None if c.get("minimo") is None else float(c["minimo"]),
                maximo=None if c.get("maximo") is None else float(c["maximo"]),
                categorias=tuple(c.get("categorias") or ()),
            )
            for c in data["columnas"]
        )
        return DatasetSchema(columnas, str(data["columna_clase"]), tuple(data.get("clases") or ()))
    except KeyError as e:
        raise ValueError(f"Esquema incompleto: falta {e}") from e


def esquema_a_yaml(schema: DatasetSchema) -> str:
    return yaml.safe_dump(esquema_a_dict(schema), sort_keys=False, allow_unicode=True)


def esquema_desde_yaml(texto: str) -> DatasetSchema:
    return esquema_desde_dict(yaml.safe_load(texto))


def cargar_esquema(path: str | Path) -> DatasetSchema:
    with open(path, "r", encoding="utf-8") as f:
        return esquema_desde_yaml(f.read())


def mascaras_a_dict(mascaras: Mapping[int, FeatureMask]) -> dict[int, dict[str, Any]]:
    return {int(k): {"indices": list(m.indices), "fraccion": m.fraccion} for k, m in mascaras.items()}


def mascaras_desde_dict(data: Mapping[Any, Any] | None) -> dict[int, FeatureMask]:
    return {int(k): FeatureMask(tuple(v["indices"]), float(v["fraccion"])) for k, v in (data or {}).items()}


# ==========================================================
# Specs de modelo
# ==========================================================
def cargar_spec_modelo(path: str | Path) -> ModelSpec:
    with open(path, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: se esperaba un mapeo YAML con la spec del modelo")
    return ModelSpec.desde_dict(data)
