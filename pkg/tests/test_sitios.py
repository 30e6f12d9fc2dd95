import io
from dataclasses import replace

import numpy as np
import pytest

from infra.config import ErrorConfiguracion
from infra.serializacion import serialize_registros
from logic.espacio import project_matrix
from logic.modelos import CounterfactualRecord, FeatureMask, Participante
from logic.orquestacion import ejecutar_destilacion, huellas
from logic.sitios import (
    COORDINADOR,
    Canal,
    Mensaje,
    ViolacionPrivacidad,
    desempaquetar_modelo,
    ejecutar_multi_sitio,
    empaquetar_modelo,
    escanear,
    preparar_sitios,
    run_multi_site,
    vectores_en,
)


NB = {"tipo": "gaussian-nb"}
SVM = {"tipo": "linear-svm"}
MLP = {"tipo": "mlp", "capas_ocultas": [6], "epocas": 15}


def _registro(x_prima, x_origen=None):
    return CounterfactualRecord(
        maestro="p1", alumno="p0", dataset="p1", indice=0, x_prima=np.asarray(x_prima, dtype=float),
        y_prima=np.array([0.4, 0.6]), etiqueta=1, ajuste=0.0, distancia=0.2, convergio=True, x_origen=x_origen,
    )


def test_multi_sitio_reproduce_la_corrida_compartida(experimento):
    config = experimento([NB, SVM], modo="multi-site", semilla=2)
    corrida, canal = ejecutar_multi_sitio(config)
    compartida = ejecutar_destilacion(replace(config, modo="shared-data"))
    a, b = corrida.reporte, compartida.reporte
    assert a.exactitud_antes == b.exactitud_antes
    assert a.exactitud_despues == b.exactitud_despues
    assert np.array_equal(a.conteos, b.conteos)
    assert a.generados == b.generados
    assert a.tasa_convergencia == b.tasa_convergencia
    assert a.lambdas == b.lambdas
    assert [r.clave for r in corrida.registros] == [r.clave for r in compartida.registros]
    for x, y in zip(a.deltas, b.deltas):
        assert np.allclose(x.medias, y.medias)
    assert {m.tipo for m in canal.historial} >= {"modelo", "parcial_delta", "resumen"}


def test_ningun_mensaje_lleva_filas_privadas(experimento):
    config = experimento([NB, SVM, MLP], modo="multi-site")
    sitios = preparar_sitios(config, Canal([*config.nombres, COORDINADOR]), {})
    esquemas = [s.participante.esquema for s in sitios]
    privadas = set()
    for s in sitios:
        ds = s._miembro.dataset
        for e in esquemas:
            privadas |= huellas(project_matrix(ds.schema, e, ds.X))

    _, canal = ejecutar_multi_sitio(config)
    assert canal.historial
    assert all(escanear(m, privadas) == 0 for m in canal.historial)
    assert not any(m.origen == COORDINADOR for m in canal.historial)


def test_el_escaneo_detecta_una_fila_inyectada(experimento):
    config = experimento([NB, SVM], modo="multi-site")
    canal = Canal([*config.nombres, COORDINADOR])
    sitio = preparar_sitios(config, canal, {})[0]
    fila = np.array(sitio._miembro.dataset.X[3])
    with pytest.raises(ViolacionPrivacidad, match="1 vectores"):
        sitio.enviar("registros", "p1", serialize_registros([_registro(fila)]))
    assert canal.historial == []


def test_lote_con_instancias_de_origen_es_rechazado():
    buff = io.BytesIO()
    np.savez(buff, x_prima=np.zeros((1, 2)), x_origen=np.ones((1, 2)))
    mensaje = Mensaje("registros", "p0", "p1", buff.getvalue())
    with pytest.raises(ViolacionPrivacidad):
        list(vectores_en(mensaje))


def test_registros_enviados_no_incluyen_origen():
    carga = serialize_registros([_registro([0.3, 0.7], x_origen=np.array([0.1, 0.1]))])
    vectores = list(vectores_en(Mensaje("registros", "p1", "p0", carga)))
    assert len(vectores) == 1
    assert escanear(Mensaje("registros", "p1", "p0", carga), huellas(np.array([[0.1, 0.1]]))) == 0


def test_conteos_enteros_no_se_confunden_con_filas():
    carga = b"conteos: [1, 0]\nsumas: [[0.25, 0.5]]\n"
    privadas = huellas(np.array([[1.0, 0.0], [0.25, 0.5]]))
    assert escanear(Mensaje("parcial_delta", "p0", COORDINADOR, carga), privadas) == 1


def test_empaquetado_de_modelo(experimento):
    config = experimento([NB, SVM], modo="multi-site", mascara={"fraccion": 0.5})
    sitio = preparar_sitios(config, Canal([*config.nombres, COORDINADOR]), {})[1]
    p = sitio.participante
    copia = desempaquetar_modelo(empaquetar_modelo(p))
    assert isinstance(copia, Participante)
    assert copia.nombre == p.nombre
    assert copia.esquema == p.esquema
    assert copia.mascaras == p.mascaras
    assert all(isinstance(m, FeatureMask) for m in copia.mascaras.values())


def test_canal_valida_y_reencola():
    canal = Canal(["a", "b"])
    canal.poner(Mensaje("resumen", "a", "b", b"fase: x\n"))
    canal.poner(Mensaje("modelo", "a", "b", b""))
    assert [m.tipo for m in canal.recibir("b", "modelo")] == ["modelo"]
    assert [m.tipo for m in canal.recibir("b")] == ["resumen"]
    with pytest.raises(ValueError):
        canal.poner(Mensaje("resumen", "a", "z", b""))
    with pytest.raises(ValueError):
        canal.poner(Mensaje("datos", "a", "b", b""))


def test_un_solo_participante(experimento):
    with pytest.raises(ErrorConfiguracion, match="2 participantes"):
        experimento([NB], modo="multi-site")


def test_requiere_modo_multi_sitio(experimento):
    with pytest.raises(ErrorConfiguracion):
        run_multi_site(experimento([NB, SVM]))


def test_nombre_reservado(experimento):
    config = experimento([NB, SVM], modo="multi-site")
    primero, segundo = config.participantes
    config = replace(config, participantes=(replace(primero, nombre=COORDINADOR), segundo))
    with pytest.raises(ErrorConfiguracion, match="reservado"):
        run_multi_site(config)
