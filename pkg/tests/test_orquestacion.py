from dataclasses import replace

import numpy as np
import pandas as pd
import pytest
import yaml

from infra.config import experimento_desde_dict
from infra.serializacion import serialize
from logic.aprendices import construir_modelo
from logic.espacio import ErrorEsquema
from logic.modelos import (
    ClaveRegistro,
    ColumnSchema,
    CounterfactualRecord,
    DatasetSchema,
    LabelSpace,
    ModelSpec,
    TeachingSet,
)
from logic.orquestacion import (
    ErrorEtapa,
    Lote,
    escalar_lambda,
    ejecutar_destilacion,
    etapa,
    huella,
    mapear,
    matriz_conteos,
    planificar_lotes,
    run_distillation,
    seleccionar_para_alumno,
    semilla_instancia,
    tasa,
)
from tests.conftest import PRESUPUESTO_CHICO, blobs


NB = {"tipo": "gaussian-nb"}
ARBOL = {"tipo": "decision-tree", "min_muestras_hoja": 3}
SVM = {"tipo": "linear-svm"}


def _config_a_mano(tmp_path, participantes, **extras):
    data = {
        "columna_clase": "clase",
        "prueba": "prueba.csv",
        "lambda": {"politica": "fija", "valor": 8.0},
        "presupuesto": dict(PRESUPUESTO_CHICO),
        **extras,
        "participantes": participantes,
    }
    return experimento_desde_dict(data, tmp_path)


def test_modelos_identicos_no_generan_contrafactuales(tmp_path):
    blobs(60).to_csv(tmp_path / "datos.csv", index=False)
    blobs(40, semilla=1).to_csv(tmp_path / "prueba.csv", index=False)
    config = _config_a_mano(tmp_path, [
        {"nombre": "a", "datos": "datos.csv", "modelo": NB},
        {"nombre": "b", "datos": "datos.csv", "modelo": NB},
    ])
    reporte = run_distillation(config)
    assert reporte.generados == 0
    assert reporte.tasa_convergencia == 1.0
    assert reporte.conteos.sum() == 0
    assert reporte.deltas == ()
    assert reporte.exactitud_antes == reporte.exactitud_despues


def _escribir_modelo(path, W, b):
    params = {"W": [W], "b": [b], "a": [1.0], "c": [0.0]}
    modelo = construir_modelo(ModelSpec("linear-svm"), params, LabelSpace(("a", "b")), 2)
    path.write_bytes(serialize(modelo))


def test_contrafactuales_fluyen_del_perfecto_al_constante(tmp_path):
    x0 = [0.0, 0.3, 0.35, 0.4, 0.45, 0.55, 0.6, 0.65, 0.7, 1.0]
    x1 = [0.5, 0.0, 0.2, 0.8, 0.4, 0.6, 1.0, 0.3, 0.7, 0.5]
    tabla = pd.DataFrame({"x0": x0, "x1": x1, "clase": ["a"] * 5 + ["b"] * 5})
    tabla.to_csv(tmp_path / "datos.csv", index=False)
    tabla.to_csv(tmp_path / "prueba.csv", index=False)
    _escribir_modelo(tmp_path / "perfecto.codist", [10.0, 0.0], -5.0)
    _escribir_modelo(tmp_path / "constante.codist", [0.0, 0.0], 5.0)
    config = _config_a_mano(tmp_path, [
        {"nombre": "perfecto", "datos": "datos.csv", "modelo_archivo": "perfecto.codist"},
        {"nombre": "constante", "datos": "datos.csv", "modelo_archivo": "constante.codist"},
    ])
    corrida = ejecutar_destilacion(config)
    conteos = corrida.reporte.conteos
    assert conteos[1, 0] > 0
    assert conteos[0, 1] == 0
    assert corrida.reporte.exactitud_antes == {"perfecto": 1.0, "constante": 0.5}
    assert all(r.maestro == "perfecto" and r.etiqueta == 0 for r in corrida.registros)
    assert all(r.convergio and r.ajuste <= config.eps_fit for r in corrida.registros)
    privadas = {huella(f) for f in tabla[["x0", "x1"]].to_numpy(dtype=float)}
    assert not any(huella(r.x_prima) in privadas for r in corrida.registros)


def test_tres_modelos_matriz_tres_por_tres(experimento):
    config = experimento([NB, ARBOL, SVM])
    corrida = ejecutar_destilacion(config)
    reporte = corrida.reporte
    assert reporte.conteos.shape == (3, 3)
    assert np.all(np.diag(reporte.conteos) == 0)
    assert set(reporte.exactitud_despues) == {"p0", "p1", "p2"}
    assert reporte.conteos.sum() == len(corrida.registros)
    for r in corrida.registros:
        assert r.x_prima.shape == (corrida.esquemas[r.alumno].dimension,)
        assert np.all((r.x_prima >= 0) & (r.x_prima <= 1))
    assert {"carga", "identificacion", "generacion", "reentrenamiento", "evaluacion"} <= set(reporte.tiempos)


def test_corrida_determinista_y_sin_efecto_de_hilos(experimento):
    config = experimento([NB, SVM], semilla=3)
    a = ejecutar_destilacion(config)
    b = ejecutar_destilacion(replace(config, hilos=4))
    assert a.reporte.exactitud_despues == b.reporte.exactitud_despues
    assert np.array_equal(a.reporte.conteos, b.reporte.conteos)
    assert [r.clave for r in a.registros] == [r.clave for r in b.registros]


def test_busqueda_de_lambda_y_linea_base_agrupada(experimento):
    config = experimento([NB, SVM], linea_base_agrupada=True, **{"lambda": {"sondas": 2, "tope": 8.0}})
    reporte = ejecutar_destilacion(config).reporte
    assert set(reporte.exactitud_agrupada) == {"p0", "p1"}
    assert all(v in (1.0, 2.0, 4.0, 8.0) for v in reporte.lambdas.values())


def test_error_de_etapa_con_contexto():
    tiempos = {}
    with pytest.raises(ErrorEtapa) as info:
        with etapa("generacion", tiempos, maestro="a", alumno="b", instancia=("a", 3)):
            raise ZeroDivisionError("x")
    assert "generacion" in str(info.value)
    assert "a[3]" in str(info.value)
    assert isinstance(info.value.causa, ZeroDivisionError)
    assert "generacion" in tiempos


def test_mapear_respeta_el_orden():
    assert mapear(lambda x: x * x, list(range(20)), 4) == [x * x for x in range(20)]


def test_lotes_en_orden_canonico():
    conjuntos = [
        TeachingSet("b", "a", frozenset({("b", 2), ("a", 5), ("b", 0)})),
        TeachingSet("a", "b", frozenset({("a", 1)})),
    ]
    lotes = planificar_lotes(conjuntos, ["a", "b"])
    assert lotes == [Lote("a", "b", "a", (1,)), Lote("b", "a", "a", (5,)), Lote("b", "a", "b", (0, 2))]


def test_semillas_por_instancia(experimento):
    config = experimento([NB, SVM])
    clave = ClaveRegistro("p0", "p1", "p0", 4)
    s = semilla_instancia(config, config.nombres, clave)
    assert s == semilla_instancia(config, config.nombres, clave)
    assert s != semilla_instancia(config, config.nombres, ClaveRegistro("p0", "p1", "p0", 5))
    assert s != semilla_instancia(replace(config, semilla=1), config.nombres, clave)


def _registro(maestro, alumno, indice, x):
    return CounterfactualRecord(
        maestro=maestro, alumno=alumno, dataset=maestro, indice=indice, x_prima=np.array(x),
        y_prima=np.array([0.5, 0.5]), etiqueta=0, ajuste=0.0, distancia=0.1, convergio=True,
    )


def test_seleccion_ordena_y_deduplica(experimento):
    config = experimento([NB, SVM])
    esquema = DatasetSchema((ColumnSchema("x", "continuous", minimo=0.0, maximo=1.0),), "clase")
    registros = [_registro("p1", "p0", 2, [0.5]), _registro("p1", "p0", 1, [0.5]), _registro("p1", "p0", 0, [0.9])]
    assert [r.indice for r in seleccionar_para_alumno(registros, esquema, config)] == [0, 1, 2]
    con_dedup = replace(config, dedup_activo=True, radio_dedup=0.01)
    assert [r.indice for r in seleccionar_para_alumno(registros, esquema, con_dedup)] == [0, 1]


def test_matriz_de_conteos_y_tasa():
    registros = [_registro("a", "b", 0, [0.1]), _registro("a", "b", 1, [0.2]), _registro("b", "a", 0, [0.3])]
    assert matriz_conteos(registros, ["a", "b"]).tolist() == [[0, 1], [2, 0]]
    assert tasa(0, 0) == 1.0
    assert tasa(3, 4) == 0.75


def test_modelo_de_archivo_con_dimension_incorrecta(tmp_path):
    blobs(30).to_csv(tmp_path / "datos.csv", index=False)
    blobs(30).to_csv(tmp_path / "prueba.csv", index=False)
    params = {"W": [[1.0, 1.0, 1.0]], "b": [0.0], "a": [1.0], "c": [0.0]}
    modelo = construir_modelo(ModelSpec("linear-svm"), params, LabelSpace(("a", "b")), 3)
    (tmp_path / "m.codist").write_bytes(serialize(modelo))
    config = _config_a_mano(tmp_path, [
        {"nombre": "a", "datos": "datos.csv", "modelo": NB},
        {"nombre": "b", "datos": "datos.csv", "modelo_archivo": "m.codist"},
    ])
    with pytest.raises(ErrorEsquema, match="dimensión 3"):
        ejecutar_destilacion(config)


def test_experimento_desde_yaml(experimento_yaml):
    path = experimento_yaml([NB, ARBOL])
    data = yaml.safe_load(path.read_text(encoding="utf-8"))
    assert [p["nombre"] for p in data["participantes"]] == ["p0", "p1"]


def _intento(umbral, ensayados):
    """Registro que converge sólo con lambda >= umbral; el ajuste baja con lambda."""
    def intentar(lam):
        ensayados.append(lam)
        r = _registro("a", "b", 0, [0.5])
        return replace(r, ajuste=1.0 / lam, convergio=lam >= umbral)
    return intentar


def test_escalar_lambda_sube_hasta_converger():
    ensayados = []
    r = escalar_lambda(_intento(16, ensayados), 1.0, 2.0, 1024.0)
    assert r.convergio
    assert ensayados == [1.0, 2.0, 4.0, 8.0, 16.0]


def test_escalar_lambda_sin_convergencia_devuelve_el_mejor_ajuste():
    ensayados = []
    r = escalar_lambda(_intento(4096, ensayados), 1.0, 2.0, 1024.0)
    assert not r.convergio
    assert ensayados[-1] == 1024.0
    assert r.ajuste == 1.0 / 1024.0


def test_escalar_lambda_no_reintenta_si_converge():
    ensayados = []
    assert escalar_lambda(_intento(1, ensayados), 8.0, 2.0, 1024.0).convergio
    assert ensayados == [8.0]


def test_escalar_lambda_tolera_fallas_del_optimizador():
    r = escalar_lambda(lambda lam: None if lam < 4 else _intento(4, [])(lam), 1.0, 2.0, 16.0)
    assert r is not None and r.convergio


def test_con_busqueda_de_lambda_todos_los_registros_convergen(tmp_path):
    x0 = [0.0, 0.3, 0.35, 0.4, 0.45, 0.55, 0.6, 0.65, 0.7, 1.0]
    x1 = [0.5, 0.0, 0.2, 0.8, 0.4, 0.6, 1.0, 0.3, 0.7, 0.5]
    tabla = pd.DataFrame({"x0": x0, "x1": x1, "clase": ["a"] * 5 + ["b"] * 5})
    tabla.to_csv(tmp_path / "datos.csv", index=False)
    tabla.to_csv(tmp_path / "prueba.csv", index=False)
    _escribir_modelo(tmp_path / "perfecto.codist", [10.0, 0.0], -5.0)
    _escribir_modelo(tmp_path / "constante.codist", [0.0, 0.0], 5.0)
    config = _config_a_mano(
        tmp_path,
        [
            {"nombre": "perfecto", "datos": "datos.csv", "modelo_archivo": "perfecto.codist"},
            {"nombre": "constante", "datos": "datos.csv", "modelo_archivo": "constante.codist"},
        ],
        **{"lambda": {"politica": "busqueda", "sondas": 1}},
    )
    corrida = ejecutar_destilacion(config)
    assert corrida.registros
    assert corrida.reporte.tasa_convergencia == 1.0
    assert all(r.ajuste <= config.eps_fit for r in corrida.registros)
