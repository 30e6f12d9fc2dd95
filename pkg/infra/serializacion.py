"""Formato binario CODIST1 para modelos y lotes de contrafactuales.

Modelo:
    magic "CODIST1" | version u8 | algoritmo u8 | clases (u32 n, n * texto) |
    dimension u32 | spec (texto YAML) | parametros (u32 n, n * arreglo)

texto = u32 largo + UTF-8; arreglo = nombre (texto) | u32 ndim | ndim * u64 | float64 LE.
"""
from __future__ import annotations

import io
import struct

import numpy as np
import yaml

from logic.aprendices import construir_modelo
from logic.modelos import CounterfactualRecord, LabelSpace, ModelSpec, TrainedModel


MAGIC = b"CODIST1"
VERSION = 1
ETIQUETAS_ALGORITMO = {"mlp": 1, "decision-tree": 2, "gaussian-nb": 3, "linear-svm": 4}
_ALGORITMO_POR_ETIQUETA = {v: k for k, v in ETIQUETAS_ALGORITMO.items()}


class ErrorFormatoModelo(ValueError):
    pass


def _texto(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


class _Lector:
    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    def leer(self, n: int) -> bytes:
        if self._pos + n > len(self._data):
            raise ErrorFormatoModelo("Archivo de modelo truncado")
        out = self._data[self._pos:self._pos + n]
        self._pos += n
        return out

    def u8(self) -> int:
        return self.leer(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.leer(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.leer(8))[0]

    def texto(self) -> str:
        return self.leer(self.u32()).decode("utf-8")

    def fin(self) -> bool:
        return self._pos == len(self._data)


def serialize(model: TrainedModel) -> bytes:
    buff = io.BytesIO()
    buff.write(MAGIC)
    buff.write(struct.pack("<BB", VERSION, ETIQUETAS_ALGORITMO[model.spec.tipo]))
    buff.write(struct.pack("<I", model.label_space.n))
    for clase in model.label_space.classes:
        buff.write(_texto(clase))
    buff.write(struct.pack("<I", model.dimension))
    buff.write(_texto(yaml.safe_dump(model.spec.como_dict(), sort_keys=True)))

    buff.write(struct.pack("<I", len(model.parametros)))
    for nombre in sorted(model.parametros):
        arr = np.asarray(model.parametros[nombre], dtype="<f8")
        buff.write(_texto(nombre))
        buff.write(struct.pack("<I", arr.ndim))
        buff.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buff.write(np.ascontiguousarray(arr).tobytes())
    return buff.getvalue()


def deserialize(data: bytes) -> TrainedModel:
    lector = _Lector(bytes(data))
    magic = lector.leer(len(MAGIC))
    if magic != MAGIC:
        raise ErrorFormatoModelo(f"Magic desconocido {magic!r} (se esperaba {MAGIC!r})")
    version = lector.u8()
    if version > VERSION or version < 1:
        raise ErrorFormatoModelo(f"Versión de formato {version} no soportada (soportada: {VERSION})")
    etiqueta = lector.u8()
    if etiqueta not in _ALGORITMO_POR_ETIQUETA:
        raise ErrorFormatoModelo(f"Algoritmo desconocido (etiqueta {etiqueta})")

    clases = tuple(lector.texto() for _ in range(lector.u32()))
    dimension = lector.u32()
    spec = ModelSpec.desde_dict(yaml.safe_load(lector.texto()))
    if spec.tipo != _ALGORITMO_POR_ETIQUETA[etiqueta]:
        raise ErrorFormatoModelo(f"La etiqueta de algoritmo no coincide con la spec ({spec.tipo})")

    parametros: dict[str, np.ndarray] = {}
    for _ in range(lector.u32()):
        nombre = lector.texto()
        ndim = lector.u32()
        forma = tuple(lector.u64() for _ in range(ndim))
        n = int(np.prod(forma)) if forma else 1
        parametros[nombre] = np.frombuffer(lector.leer(8 * n), dtype="<f8").reshape(forma).astype(float)
    if not lector.fin():
        raise ErrorFormatoModelo("Bytes sobrantes al final del archivo de modelo")

    return construir_modelo(spec, parametros, LabelSpace(clases), dimension)


# ==========================================================
# Lotes de contrafactuales (mensajes entre sitios)
# ==========================================================
def serialize_registros(registros: list[CounterfactualRecord]) -> bytes:
    """Lote de registros como archivo NumPy sin pickles; nunca incluye x_origen."""
    buff = io.BytesIO()
    if registros:
        x_prima = np.array([r.x_prima for r in registros], dtype="<f8")
        y_prima = np.array([r.y_prima for r in registros], dtype="<f8")
    else:
        x_prima = np.zeros((0, 0))
        y_prima = np.zeros((0, 0))
    np.savez(
        buff,
        maestro=np.array([r.maestro for r in registros], dtype=str),
        alumno=np.array([r.alumno for r in registros], dtype=str),
        dataset=np.array([r.dataset for r in registros], dtype=str),
        indice=np.array([r.indice for r in registros], dtype="<i8"),
        x_prima=x_prima,
        y_prima=y_prima,
        etiqueta=np.array([r.etiqueta for r in registros], dtype="<i8"),
        ajuste=np.array([r.ajuste for r in registros], dtype="<f8"),
        distancia=np.array([r.distancia for r in registros], dtype="<f8"),
        convergio=np.array([r.convergio for r in registros], dtype=bool),
    )
    return buff.getvalue()


def deserialize_registros(data: bytes) -> list[CounterfactualRecord]:
    with np.load(io.BytesIO(data), allow_pickle=False) as z:
        a = {k: z[k] for k in z.files}
    return [
        CounterfactualRecord(
            maestro=str(a["maestro"][i]),
            alumno=str(a["alumno"][i]),
            dataset=str(a["dataset"][i]),
            indice=int(a["indice"][i]),
            x_prima=a["x_prima"][i].astype(float),
            y_prima=a["y_prima"][i].astype(float),
            etiqueta=int(a["etiqueta"][i]),
            ajuste=float(a["ajuste"][i]),
            distancia=float(a["distancia"][i]),
            convergio=bool(a["convergio"][i]),
        )
        for i in range(len(a["indice"]))
    ]
