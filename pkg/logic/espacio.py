from __future__ import annotations

import math
from numbers import Integral, Real
from typing import Any, Iterable, Mapping

import numpy as np
import pandas as pd

from infra.logger import get_logger
from logic.modelos import ColumnSchema, Dataset, DatasetSchema, LabelSpace, congelar


log = get_logger("espacio")

FALTANTE = None


class ErrorEsquema(ValueError):
    pass


def _es_faltante(valor: Any) -> bool:
    if valor is None:
        return True
    try:
        return bool(pd.isna(valor))
    except (TypeError, ValueError):
        return False


def como_categoria(valor: Any) -> str | None:
    """Texto uniforme para categorías y clases: sin sufijos `.0` cuando vienen de números."""
    if _es_faltante(valor):
        return None
    if isinstance(valor, str):
        return valor.strip()
    if isinstance(valor, (bool, np.bool_)):
        return str(bool(valor))
    if isinstance(valor, Integral):
        return str(int(valor))
    if isinstance(valor, Real):
        numero = float(valor)
        if math.isfinite(numero) and numero.is_integer():
            return str(int(numero))
        return str(valor)
    return str(valor)


def ordenar_clases(clases: Iterable[str]) -> tuple[str, ...]:
    """Orden estable de clases: numérico si todas son números, lexicográfico si no."""
    unicas = list(dict.fromkeys(clases))
    try:
        return tuple(sorted(unicas, key=float))
    except ValueError:
        return tuple(sorted(unicas))


def _serie_categorica(serie: pd.Series) -> pd.Series:
    return serie.map(como_categoria)


def _serie_continua(serie: pd.Series, nombre: str) -> pd.Series:
    numeros = pd.to_numeric(serie, errors="coerce")
    invalidos = numeros.isna() & serie.notna()
    if invalidos.any():
        ejemplo = serie[invalidos].iloc[0]
        raise ErrorEsquema(f"Columna continua '{nombre}' con valor no numérico: {ejemplo!r}")
    return numeros.astype(float)


# ==========================================================
# Esquemas
# ==========================================================
def build_schema(
    tabla: pd.DataFrame,
    columna_clase: str,
    tipos: Mapping[str, str] | None = None,
    max_fraccion_faltantes: float | None = None,
) -> DatasetSchema:
    """Construye el esquema observado de una tabla cruda.

    Las columnas no declaradas en `tipos` se toman como continuas. Con
    `max_fraccion_faltantes` se excluyen las columnas con demasiados faltantes.
    """
    if tabla.empty:
        raise ErrorEsquema("La tabla está vacía.")
    if columna_clase not in tabla.columns:
        raise ErrorEsquema(f"No existe la columna de clase '{columna_clase}'")
    tipos = dict(tipos or {})
    faltan = [c for c in tipos if c not in tabla.columns]
    if faltan:
        raise ErrorEsquema(f"Columnas declaradas que no están en la tabla: {faltan}")

    columnas: list[ColumnSchema] = []
    for nombre in tabla.columns:
        if nombre == columna_clase:
            continue
        serie = tabla[nombre]
        if max_fraccion_faltantes is not None and serie.isna().mean() > max_fraccion_faltantes:
            log.info("Columna '%s' excluida: %.0f%% faltantes", nombre, 100 * serie.isna().mean())
            continue

        tipo = tipos.get(nombre, "continuous")
        if tipo == "continuous":
            valores = _serie_continua(serie, str(nombre)).dropna()
            if valores.empty:
                raise ErrorEsquema(f"Columna continua '{nombre}' sin valores")
            vmin, vmax = float(valores.min()), float(valores.max())
            if not vmin < vmax:
                raise ErrorEsquema(f"Columna continua '{nombre}' constante ({vmin})")
            columnas.append(ColumnSchema(str(nombre), "continuous", minimo=vmin, maximo=vmax))
        elif tipo == "categorical":
            cats = [c for c in _serie_categorica(serie) if c is not None]
            if not cats:
                raise ErrorEsquema(f"Columna categórica '{nombre}' vacía")
            columnas.append(ColumnSchema(str(nombre), "categorical", categorias=tuple(dict.fromkeys(cats))))
        else:
            raise ErrorEsquema(f"Tipo desconocido '{tipo}' para '{nombre}'")

    if not columnas:
        raise ErrorEsquema("El esquema no tiene atributos.")
    clases = [c for c in _serie_categorica(tabla[columna_clase]) if c is not None]
    return DatasetSchema(tuple(columnas), columna_clase, ordenar_clases(clases))


def feature_names(schema: DatasetSchema) -> tuple[str, ...]:
    out: list[str] = []
    for c in schema.columnas:
        if c.tipo == "continuous":
            out.append(c.nombre)
        else:
            out.extend(f"{c.nombre}={cat}" for cat in c.categorias)
    return tuple(out)


# ==========================================================
# Codificacion
# ==========================================================
def _codificar_continua(col: ColumnSchema, valores: np.ndarray) -> np.ndarray:
    enc = (valores - col.minimo) / (col.maximo - col.minimo)
    enc = np.clip(enc, 0.0, 1.0)
    return np.where(np.isnan(enc), 0.0, enc)


def encode(schema: DatasetSchema, fila: Mapping[str, Any]) -> np.ndarray:
    """Codifica una fila cruda: continuas a [0,1], categóricas one-hot, faltantes en cero."""
    out = np.zeros(schema.dimension)
    pos = 0
    for col in schema.columnas:
        valor = fila.get(col.nombre)
        if col.tipo == "continuous":
            if not _es_faltante(valor):
                out[pos] = _codificar_continua(col, np.array([float(valor)]))[0]
        else:
            cat = como_categoria(valor)
            if cat is not None:
                if cat in col.categorias:
                    out[pos + col.categorias.index(cat)] = 1.0
                else:
                    log.warning("Categoría desconocida '%s' en '%s': se codifica como faltante", cat, col.nombre)
        pos += col.ancho
    return out


def _codificar_matriz(schema: DatasetSchema, tabla: pd.DataFrame) -> np.ndarray:
    n = len(tabla)
    X = np.zeros((n, schema.dimension))
    pos = 0
    for col in schema.columnas:
        if col.nombre in tabla.columns:
            serie = tabla[col.nombre]
            if col.tipo == "continuous":
                X[:, pos] = _codificar_continua(col, _serie_continua(serie, col.nombre).to_numpy())
            else:
                cats = _serie_categorica(serie)
                for k, cat in enumerate(col.categorias):
                    X[:, pos + k] = (cats == cat).to_numpy(dtype=float)
                desconocidas = cats.notna() & ~cats.isin(col.categorias)
                if desconocidas.any():
                    log.warning(
                        "%d valores con categoría desconocida en '%s': se codifican como faltantes",
                        int(desconocidas.sum()), col.nombre,
                    )
        pos += col.ancho
    return X


def encode_table(
    schema: DatasetSchema,
    tabla: pd.DataFrame,
    label_space: LabelSpace | None = None,
    nombre: str = "",
) -> Dataset:
    """Codifica una tabla completa (con columna de clase) en un Dataset inmutable."""
    if schema.columna_clase not in tabla.columns:
        raise ErrorEsquema(f"La tabla no tiene la columna de clase '{schema.columna_clase}'")
    label_space = label_space or LabelSpace(schema.clases)

    clases = _serie_categorica(tabla[schema.columna_clase])
    sin_clase = clases.isna()
    if sin_clase.any():
        log.warning("%s: %d filas sin clase descartadas", nombre or "dataset", int(sin_clase.sum()))
        tabla = tabla.loc[~sin_clase.to_numpy()]
        clases = clases[~sin_clase]
    raw = tabla.reset_index(drop=True).copy()

    try:
        y = np.array([label_space.indice(c) for c in clases], dtype=int)
    except ValueError as e:
        raise ErrorEsquema(str(e)) from e

    X = _codificar_matriz(schema, raw)
    return Dataset(
        schema=schema,
        raw=raw,
        X=congelar(X),
        y=congelar(y, dtype=int),
        label_space=label_space,
        nombre=nombre,
    )


def decode(schema: DatasetSchema, vector: np.ndarray) -> dict[str, Any]:
    """Inversa de encode: continuas re-escaladas, bloques categóricos por argmax (o faltante)."""
    vector = np.asarray(vector, dtype=float)
    if vector.shape != (schema.dimension,):
        raise ErrorEsquema(f"Vector de dimensión {vector.shape} para un esquema de dimensión {schema.dimension}")
    out: dict[str, Any] = {}
    pos = 0
    for col in schema.columnas:
        if col.tipo == "continuous":
            out[col.nombre] = col.minimo + float(vector[pos]) * (col.maximo - col.minimo)
        else:
            bloque = vector[pos:pos + col.ancho]
            k = int(np.argmax(bloque))
            out[col.nombre] = col.categorias[k] if bloque[k] >= 0.5 else FALTANTE
        pos += col.ancho
    return out


# ==========================================================
# Proyeccion entre esquemas
# ==========================================================
def project_matrix(origen: DatasetSchema, destino: DatasetSchema, X: np.ndarray) -> np.ndarray:
    """Proyecta filas codificadas del esquema origen al destino.

    Las columnas compartidas se copian (las continuas pasan por el valor crudo
    cuando min/max difieren); las exclusivas del destino quedan en cero.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != origen.dimension:
        raise ErrorEsquema(f"Vector de dimensión {X.shape[1]}, el esquema origen tiene {origen.dimension}")
    if origen == destino:
        return X.copy()

    off_s, off_t = origen.desplazamientos(), destino.desplazamientos()
    out = np.zeros((X.shape[0], destino.dimension))
    compartidas = 0
    for t in destino.columnas:
        s = origen.columna(t.nombre)
        if s is None or s.tipo != t.tipo:
            continue
        ps, pt = off_s[t.nombre], off_t[t.nombre]
        if t.tipo == "continuous":
            if (s.minimo, s.maximo) == (t.minimo, t.maximo):
                out[:, pt] = X[:, ps]
            else:
                crudo = s.minimo + X[:, ps] * (s.maximo - s.minimo)
                out[:, pt] = np.clip((crudo - t.minimo) / (t.maximo - t.minimo), 0.0, 1.0)
            compartidas += 1
        else:
            comunes = False
            for k, cat in enumerate(t.categorias):
                if cat in s.categorias:
                    out[:, pt + k] = X[:, ps + s.categorias.index(cat)]
                    comunes = True
            compartidas += comunes
    if not compartidas:
        raise ErrorEsquema("Esquemas disjuntos: no hay columnas compartidas, la destilación es imposible.")
    return out


def project(origen: DatasetSchema, destino: DatasetSchema, vector: np.ndarray) -> np.ndarray:
    vector = np.asarray(vector, dtype=float)
    if vector.ndim != 1:
        raise ErrorEsquema("project espera un único vector")
    return project_matrix(origen, destino, vector[None, :])[0]
