import struct

import numpy as np
import pytest

from infra.serializacion import (
    MAGIC,
    ErrorFormatoModelo,
    deserialize,
    deserialize_registros,
    serialize,
    serialize_registros,
)
from logic.aprendices import fit_arrays, predict_proba
from logic.modelos import CounterfactualRecord, LabelSpace, ModelSpec


def _modelo(tipo="mlp"):
    rng = np.random.default_rng(0)
    X = rng.uniform(size=(40, 3))
    y = (X[:, 0] + X[:, 1] > 1).astype(int)
    spec = ModelSpec(tipo, capas_ocultas=(5,), epocas=10)
    return fit_arrays(spec, X, y, LabelSpace(("no", "si")))


@pytest.mark.parametrize("tipo", ["mlp", "decision-tree", "gaussian-nb", "linear-svm"])
def test_modelo_recuperado_predice_identico(tipo):
    modelo = _modelo(tipo)
    copia = deserialize(serialize(modelo))
    sondas = np.random.default_rng(1).uniform(size=(100, 3))
    assert np.array_equal(predict_proba(modelo, sondas), predict_proba(copia, sondas))
    assert copia.spec == modelo.spec
    assert copia.label_space == modelo.label_space
    assert copia.diferenciable == modelo.diferenciable


def test_magic_corrupto():
    data = bytearray(serialize(_modelo()))
    data[0] = ord("X")
    with pytest.raises(ErrorFormatoModelo, match="Magic"):
        deserialize(bytes(data))


def test_version_no_soportada_nombra_ambas():
    data = bytearray(serialize(_modelo()))
    data[len(MAGIC)] = 9
    with pytest.raises(ErrorFormatoModelo, match=r"9.*1"):
        deserialize(bytes(data))


def test_archivo_truncado_o_con_sobrantes():
    data = serialize(_modelo("gaussian-nb"))
    with pytest.raises(ErrorFormatoModelo, match="truncado"):
        deserialize(data[:-5])
    with pytest.raises(ErrorFormatoModelo, match="sobrantes"):
        deserialize(data + struct.pack("<I", 0))


def test_lote_de_registros_sin_instancia_de_origen():
    r = CounterfactualRecord(
        maestro="a", alumno="b", dataset="a", indice=4,
        x_prima=np.array([0.1, 0.2]), y_prima=np.array([0.3, 0.7]), etiqueta=1,
        ajuste=0.001, distancia=0.25, convergio=True, x_origen=np.array([0.0, 0.0]),
    )
    (copia,) = deserialize_registros(serialize_registros([r]))
    assert copia.clave == r.clave
    assert np.array_equal(copia.x_prima, r.x_prima)
    assert copia.x_origen is None
    assert deserialize_registros(serialize_registros([])) == []
