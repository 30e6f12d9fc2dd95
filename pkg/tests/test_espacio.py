import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from logic.espacio import (
    ErrorEsquema,
    build_schema,
    como_categoria,
    decode,
    encode,
    encode_table,
    feature_names,
    ordenar_clases,
    project,
    project_matrix,
)
from logic.modelos import ColumnSchema, DatasetSchema, LabelSpace


def _esquema(*columnas):
    return DatasetSchema(tuple(columnas), "clase", ("0", "1"))


CONT = ColumnSchema("v", "continuous", minimo=2.0, maximo=10.0)
COLOR = ColumnSchema("color", "categorical", categorias=("red", "blue"))


def test_build_schema_extremos_y_categorias():
    tabla = pd.DataFrame({"v": [2, 4, 10], "color": ["red", "blue", "red"], "clase": [0, 1, 0]})
    schema = build_schema(tabla, "clase", tipos={"color": "categorical"})
    v, color = schema.columnas
    assert (v.minimo, v.maximo) == (2.0, 10.0)
    assert color.categorias == ("red", "blue")
    assert schema.clases == ("0", "1")
    assert schema.dimension == 3
    assert feature_names(schema) == ("v", "color=red", "color=blue")


def test_build_schema_columna_constante():
    tabla = pd.DataFrame({"v": [5, 5, 5], "clase": [0, 1, 0]})
    with pytest.raises(ErrorEsquema, match="constante"):
        build_schema(tabla, "clase")


def test_build_schema_excluye_columnas_con_faltantes():
    tabla = pd.DataFrame({"v": [1.0, 2.0, 3.0, 4.0], "w": [1.0, None, None, None], "clase": [0, 1, 0, 1]})
    schema = build_schema(tabla, "clase", max_fraccion_faltantes=0.5)
    assert [c.nombre for c in schema.columnas] == ["v"]


def test_build_schema_sin_columna_de_clase():
    with pytest.raises(ErrorEsquema):
        build_schema(pd.DataFrame({"v": [1, 2]}), "clase")


def test_encode_ejemplos():
    schema = _esquema(CONT, COLOR)
    assert list(encode(schema, {"v": 6, "color": "blue"})) == [0.5, 0.0, 1.0]
    assert list(encode(schema, {"color": "red"})) == [0.0, 1.0, 0.0]
    assert list(encode(schema, {"v": None, "color": None})) == [0.0, 0.0, 0.0]


def test_encode_recorta_fuera_de_rango():
    schema = _esquema(CONT)
    assert list(encode(schema, {"v": 20})) == [1.0]
    assert list(encode(schema, {"v": -3})) == [0.0]


def test_decode_ejemplos():
    schema = _esquema(CONT, COLOR)
    assert decode(schema, np.array([0.5, 0.1, 0.9])) == {"v": 6.0, "color": "blue"}
    assert decode(schema, np.array([0.0, 0.2, 0.3]))["color"] is None


@settings(max_examples=100)
@given(st.floats(min_value=2.0, max_value=10.0), st.sampled_from(["red", "blue"]))
def test_decode_invierte_encode(v, color):
    schema = _esquema(CONT, COLOR)
    fila = decode(schema, encode(schema, {"v": v, "color": color}))
    assert fila["v"] == pytest.approx(v)
    assert fila["color"] == color


def test_encode_table_descarta_filas_sin_clase():
    schema = _esquema(CONT)
    tabla = pd.DataFrame({"v": [2, 6, 10], "clase": [0, None, 1]})
    ds = encode_table(schema, tabla, LabelSpace(("0", "1")))
    assert len(ds) == 2
    assert list(ds.y) == [0, 1]
    assert not ds.X.flags.writeable


def test_encode_table_clase_desconocida():
    schema = _esquema(CONT)
    tabla = pd.DataFrame({"v": [2, 6], "clase": [0, 7]})
    with pytest.raises(ErrorEsquema, match="7"):
        encode_table(schema, tabla, LabelSpace(("0", "1")))


def test_proyeccion_identidad():
    schema = _esquema(CONT, COLOR)
    X = np.array([[0.25, 1.0, 0.0]])
    assert np.array_equal(project_matrix(schema, schema, X), X)


def test_proyeccion_copia_compartidas_y_anula_exclusivas():
    a = ColumnSchema("a", "continuous", minimo=0.0, maximo=1.0)
    b = ColumnSchema("b", "continuous", minimo=0.0, maximo=1.0)
    c = ColumnSchema("c", "continuous", minimo=0.0, maximo=1.0)
    origen, destino = _esquema(a, b), _esquema(b, c)
    assert list(project(origen, destino, np.array([0.3, 0.7]))) == [0.7, 0.0]


def test_proyeccion_reescala_por_valor_crudo():
    origen = _esquema(ColumnSchema("v", "continuous", minimo=0.0, maximo=10.0))
    destino = _esquema(ColumnSchema("v", "continuous", minimo=5.0, maximo=15.0))
    assert project(origen, destino, np.array([0.8]))[0] == pytest.approx(0.3)


def test_proyeccion_categorias_parciales():
    origen = _esquema(COLOR)
    destino = _esquema(ColumnSchema("color", "categorical", categorias=("blue", "green")))
    assert list(project(origen, destino, np.array([0.0, 1.0]))) == [1.0, 0.0]


def test_proyeccion_esquemas_disjuntos():
    otro = _esquema(ColumnSchema("w", "continuous", minimo=0.0, maximo=1.0))
    with pytest.raises(ErrorEsquema, match="disjuntos"):
        project(_esquema(CONT), otro, np.array([0.5]))


def test_como_categoria_y_orden_de_clases():
    assert como_categoria(1.0) == "1"
    assert como_categoria(" si ") == "si"
    assert como_categoria(float("nan")) is None
    assert ordenar_clases(["10", "2", "1"]) == ("1", "2", "10")
    assert ordenar_clases(["b", "a"]) == ("a", "b")
