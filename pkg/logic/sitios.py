"""Protocolo multi-sitio: los sitios intercambian modelos y registros virtuales, nunca datos.

La simulación corre en un proceso; el `Canal` (colas en memoria) es la única vía
entre sitios y todo mensaje saliente pasa por el escaneo de privacidad.
"""
from __future__ import annotations

import io
import queue
import time
from collections import defaultdict
from dataclasses import dataclass
from typing import Any, Iterable, Iterator, Literal, Mapping

import numpy as np
import pandas as pd
import yaml

from infra.config import ErrorConfiguracion, ExperimentConfig
from infra.loader_datos import esquema_a_yaml, esquema_desde_yaml, leer_csv, mascaras_a_dict, mascaras_desde_dict
from infra.logger import get_logger
from infra.serializacion import deserialize, deserialize_registros, serialize, serialize_registros
from logic.destilacion import AcumuladorDelta, ordenar_registros, teaching_sets
from logic.espacio import ErrorEsquema, feature_names, project_matrix
from logic.modelos import CounterfactualRecord, DatasetSchema, DistillationReport, LabelSpace, Participante
from logic.orquestacion import (
    Miembro,
    ResultadoCorrida,
    candidatos,
    espacio_etiquetas,
    etapa,
    experticia,
    exactitud,
    generar_lotes,
    huella,
    huellas,
    leer_participante,
    planificar_lotes,
    preparar_miembro,
    reentrenar,
    seleccionar_para_alumno,
    tasa,
)


log = get_logger("sitios")

COORDINADOR = "coordinador"
TipoMensaje = Literal["modelo", "registros", "parcial_delta", "resumen"]
TIPOS_MENSAJE = ("modelo", "registros", "parcial_delta", "resumen")
# estructura del árbol (índices y conteos): no son vectores del espacio de atributos
_PARAMETROS_ESTRUCTURALES = frozenset({"atributo", "izquierda", "derecha", "conteos"})


class ViolacionPrivacidad(RuntimeError):
    pass


@dataclass(frozen=True)
class Mensaje:
    tipo: TipoMensaje
    origen: str
    destino: str
    carga: bytes


# ==========================================================
# Cargas de los mensajes
# ==========================================================
def empaquetar_modelo(participante: Participante) -> bytes:
    """Modelo CODIST1 + esquema YAML + máscaras, en un archivo NumPy sin pickles."""
    buff = io.BytesIO()
    np.savez(
        buff,
        nombre=np.array(participante.nombre),
        modelo=np.frombuffer(serialize(participante.modelo), dtype=np.uint8),
        esquema=np.array(esquema_a_yaml(participante.esquema)),
        mascaras=np.array(yaml.safe_dump(mascaras_a_dict(participante.mascaras), sort_keys=True)),
    )
    return buff.getvalue()


def desempaquetar_modelo(carga: bytes) -> Participante:
    with np.load(io.BytesIO(carga), allow_pickle=False) as z:
        return Participante(
            nombre=str(z["nombre"]),
            modelo=deserialize(z["modelo"].tobytes()),
            esquema=esquema_desde_yaml(str(z["esquema"])),
            mascaras=mascaras_desde_dict(yaml.safe_load(str(z["mascaras"]))),
        )


def _texto_yaml(data: Mapping[str, Any]) -> bytes:
    return yaml.safe_dump(dict(data), sort_keys=False, allow_unicode=True).encode("utf-8")


def _vectores_yaml(data: Any) -> Iterator[np.ndarray]:
    if isinstance(data, dict):
        for v in data.values():
            yield from _vectores_yaml(v)
    elif isinstance(data, list):
        numeros = data and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in data)
        # listas enteras (conteos) no describen instancias
        if numeros and any(isinstance(v, float) for v in data):
            yield np.asarray(data, dtype=float)
        elif not numeros:
            for v in data:
                yield from _vectores_yaml(v)


def _filas_y_columnas(arr: np.ndarray) -> Iterator[np.ndarray]:
    arr = np.asarray(arr, dtype=float)
    if arr.ndim == 1:
        yield arr
    elif arr.ndim == 2:
        yield from arr
        yield from arr.T


def vectores_en(mensaje: Mensaje) -> Iterator[np.ndarray]:
    """Todos los vectores numéricos que un mensaje transporta."""
    if mensaje.tipo == "modelo":
        participante = desempaquetar_modelo(mensaje.carga)
        for nombre, arr in participante.modelo.parametros.items():
            if nombre in _PARAMETROS_ESTRUCTURALES:
                continue
            yield from _filas_y_columnas(arr)
    elif mensaje.tipo == "registros":
        with np.load(io.BytesIO(mensaje.carga), allow_pickle=False) as z:
            if "x_origen" in z.files:
                raise ViolacionPrivacidad(f"{mensaje.origen} -> {mensaje.destino}: el lote trae instancias de origen")
        for r in deserialize_registros(mensaje.carga):
            yield r.x_prima
    else:
        yield from _vectores_yaml(yaml.safe_load(mensaje.carga.decode("utf-8")))


def escanear(mensaje: Mensaje, privadas: set[bytes]) -> int:
    """Cuántos vectores del mensaje coinciden exactamente con una fila privada."""
    return sum(huella(v) in privadas for v in vectores_en(mensaje))


# ==========================================================
# Canal y sitios
# ==========================================================
class Canal:
    """Una cola por destinatario. Guarda el historial para auditorías."""

    def __init__(self, destinos: Iterable[str]):
        self._colas: dict[str, queue.Queue[Mensaje]] = {d: queue.Queue() for d in destinos}
        self.historial: list[Mensaje] = []

    def poner(self, mensaje: Mensaje) -> None:
        if mensaje.tipo not in TIPOS_MENSAJE:
            raise ValueError(f"Tipo de mensaje desconocido '{mensaje.tipo}'")
        if mensaje.destino not in self._colas:
            raise ValueError(f"Destino desconocido '{mensaje.destino}'")
        self.historial.append(mensaje)
        self._colas[mensaje.destino].put(mensaje)

    def recibir(self, destino: str, tipo: TipoMensaje | None = None) -> list[Mensaje]:
        """Vacía la cola del destino; los mensajes de otro tipo vuelven a la cola."""
        cola = self._colas[destino]
        todos: list[Mensaje] = []
        while True:
            try:
                todos.append(cola.get_nowait())
            except queue.Empty:
                break
        out = [m for m in todos if tipo is None or m.tipo == tipo]
        for m in todos:
            if tipo is not None and m.tipo != tipo:
                cola.put(m)
        return out


class Site:
    """Un sitio: datos privados, modelo propio y lo recibido de los demás."""

    def __init__(self, miembro: Miembro, config: ExperimentConfig, canal: Canal):
        self._miembro = miembro
        self._config = config
        self._canal = canal
        self.nombre = miembro.nombre
        self.modelos_recibidos: dict[str, Participante] = {}
        self.registros_recibidos: list[CounterfactualRecord] = []
        self.seleccion: list[CounterfactualRecord] = []
        self._locales: list[CounterfactualRecord] = []

    @property
    def participante(self) -> Participante:
        return self._miembro.participante

    def huellas_privadas(self) -> set[bytes]:
        """Filas privadas en el esquema propio y proyectadas a cada esquema conocido."""
        ds = self._miembro.dataset
        out = huellas(ds.X)
        for otro in self.modelos_recibidos.values():
            try:
                out |= huellas(project_matrix(ds.schema, otro.esquema, ds.X))
            except ErrorEsquema:
                continue
        return out

    def enviar(self, tipo: TipoMensaje, destino: str, carga: bytes) -> None:
        mensaje = Mensaje(tipo, self.nombre, destino, carga)
        coincidencias = escanear(mensaje, self.huellas_privadas())
        if coincidencias:
            raise ViolacionPrivacidad(
                f"{self.nombre} -> {destino} ({tipo}): {coincidencias} vectores coinciden con filas privadas"
            )
        self._canal.poner(mensaje)

    # ---- fase 1: modelos
    def publicar_modelo(self, destinos: Iterable[str]) -> None:
        carga = empaquetar_modelo(self.participante)
        for d in destinos:
            if d != self.nombre:
                self.enviar("modelo", d, carga)

    def recibir_modelos(self) -> None:
        for m in self._canal.recibir(self.nombre, "modelo"):
            p = desempaquetar_modelo(m.carga)
            self.modelos_recibidos[p.nombre] = p

    # ---- fase 2: generación sobre datos propios
    def generar(self) -> None:
        config = self._config
        participantes = {self.nombre: self.participante, **self.modelos_recibidos}
        faltan = [n for n in config.nombres if n not in participantes]
        if faltan:
            raise RuntimeError(f"{self.nombre}: faltan los modelos de {faltan}")
        locales = {self.nombre: self._miembro.dataset}

        expertise = [experticia(participantes[n], locales) for n in config.nombres]
        lotes = planificar_lotes(teaching_sets(expertise), config.nombres)
        resultados = generar_lotes(lotes, participantes, locales, config)

        aptos = candidatos((r for res in resultados for r in res.registros), config)
        acc = AcumuladorDelta(self._miembro.dataset.label_space.classes)
        por_alumno: dict[str, list[CounterfactualRecord]] = defaultdict(list)
        for r in aptos:
            acc.agregar(r)
            por_alumno[r.alumno].append(r)

        for alumno, registros in por_alumno.items():
            if alumno == self.nombre:
                self._locales.extend(registros)
            else:
                self.enviar("registros", alumno, serialize_registros(registros))
        self.enviar("parcial_delta", COORDINADOR, _texto_yaml(acc.como_dict()))
        self.enviar("resumen", COORDINADOR, _texto_yaml({
            "fase": "generacion",
            "generados": sum(r.generados for r in resultados),
            "convergidos": sum(r.convergidos for r in resultados),
            "lambdas": [
                {"maestro": r.lote.maestro, "alumno": r.lote.alumno, "dataset": r.lote.dataset, "valor": r.lam}
                for r in resultados if r.lam is not None
            ],
        }))
        log.info("%s: %d registros generados sobre datos propios", self.nombre, len(aptos))

    # ---- fase 3: reentrenamiento
    def reentrenar(self) -> None:
        for m in self._canal.recibir(self.nombre, "registros"):
            self.registros_recibidos.extend(deserialize_registros(m.carga))
        todos = [*self._locales, *self.registros_recibidos]
        self.seleccion = seleccionar_para_alumno(todos, self.participante.esquema, self._config)
        nuevo = reentrenar(self._miembro, self.seleccion, self._config)

        conteos: dict[str, int] = defaultdict(int)
        for r in self.seleccion:
            conteos[r.maestro] += 1
        reentrenado = Participante(self.nombre, nuevo, self.participante.esquema, self.participante.mascaras)
        self.enviar("modelo", COORDINADOR, empaquetar_modelo(reentrenado))
        self.enviar("resumen", COORDINADOR, _texto_yaml({
            "fase": "reentrenamiento",
            "alumno": self.nombre,
            "conteos": dict(conteos),
        }))
        log.info("%s: reentrenado con %d instancias virtuales", self.nombre, len(self.seleccion))


# ==========================================================
# Coordinador
# ==========================================================
def preparar_sitios(config: ExperimentConfig, canal: Canal, tiempos: dict[str, float]) -> list[Site]:
    """Cada sitio lee sus datos; solo la lista de clases de cada esquema sale del sitio."""
    inicio = time.perf_counter()
    leidos = [leer_participante(p, config) for p in config.participantes]
    label_space = espacio_etiquetas(e for _, e in leidos)
    tiempos["carga"] = time.perf_counter() - inicio
    with etapa("linea_base", tiempos):
        return [
            Site(preparar_miembro(k, config.participantes[k], tabla, esquema, label_space, config), config, canal)
            for k, (tabla, esquema) in enumerate(leidos)
        ]


def _evaluar(
    modelos: Mapping[str, Participante], prueba: pd.DataFrame, label_space: LabelSpace
) -> dict[str, float]:
    return {n: exactitud(p.modelo, p.esquema, prueba, label_space) for n, p in modelos.items()}


def ejecutar_multi_sitio(config: ExperimentConfig) -> tuple[ResultadoCorrida, Canal]:
    if config.modo != "multi-site":
        raise ErrorConfiguracion(f"run_multi_site requiere modo 'multi-site' (recibido '{config.modo}')")
    if COORDINADOR in config.nombres:
        raise ErrorConfiguracion(f"'{COORDINADOR}' es un nombre reservado")
    if config.linea_base_agrupada:
        log.warning("La línea base agrupada requiere datos compartidos: se omite en modo multi-sitio")

    nombres = config.nombres
    tiempos: dict[str, float] = {}
    canal = Canal([*nombres, COORDINADOR])
    sitios = preparar_sitios(config, canal, tiempos)
    prueba = leer_csv(config.prueba)
    label_space = sitios[0].participante.modelo.label_space

    with etapa("intercambio", tiempos):
        for s in sitios:
            s.publicar_modelo([*nombres, COORDINADOR])
        for s in sitios:
            s.recibir_modelos()
        base = {
            p.nombre: p
            for p in (desempaquetar_modelo(m.carga) for m in canal.recibir(COORDINADOR, "modelo"))
        }
    with etapa("generacion", tiempos):
        for s in sitios:
            s.generar()
    with etapa("reentrenamiento", tiempos):
        for s in sitios:
            s.reentrenar()

    with etapa("evaluacion", tiempos):
        recibidos = canal.recibir(COORDINADOR)
        nuevos = {p.nombre: p for p in (desempaquetar_modelo(m.carga) for m in recibidos if m.tipo == "modelo")}
        antes = _evaluar({n: base[n] for n in nombres}, prueba, label_space)
        despues = _evaluar({n: nuevos[n] for n in nombres}, prueba, label_space)

    acc = AcumuladorDelta(label_space.classes)
    generados = convergidos = 0
    lambdas: dict[tuple[str, str, str], float] = {}
    conteos = np.zeros((len(nombres), len(nombres)), dtype=int)
    pos = {n: k for k, n in enumerate(nombres)}
    for m in recibidos:
        if m.tipo == "parcial_delta":
            acc.combinar(AcumuladorDelta.desde_dict(yaml.safe_load(m.carga.decode("utf-8"))))
        elif m.tipo == "resumen":
            resumen = yaml.safe_load(m.carga.decode("utf-8"))
            if resumen["fase"] == "generacion":
                generados += resumen["generados"]
                convergidos += resumen["convergidos"]
                for lam in resumen["lambdas"]:
                    lambdas[(lam["maestro"], lam["alumno"], lam["dataset"])] = float(lam["valor"])
            else:
                for maestro, n in resumen["conteos"].items():
                    conteos[pos[resumen["alumno"]], pos[maestro]] = n

    orden_lambdas = sorted(lambdas, key=lambda k: (pos[k[0]], pos[k[1]], pos[k[2]]))
    # volcado local de cada alumno; el reporte sale solo de los mensajes
    conservados = ordenar_registros((r for s in sitios for r in s.seleccion), nombres, nombres)

    esquemas: dict[str, DatasetSchema] = {n: base[n].esquema for n in nombres}
    reporte = DistillationReport(
        modelos=nombres,
        exactitud_antes=antes,
        exactitud_despues=despues,
        conteos=conteos,
        deltas=acc.resultado(nombres),
        atributos={n: feature_names(e) for n, e in esquemas.items()},
        tasa_convergencia=tasa(convergidos, generados),
        generados=generados,
        lambdas={k: lambdas[k] for k in orden_lambdas},
        tiempos=tiempos,
    )
    log.info("Multi-sitio: %d mensajes intercambiados, ninguno con filas privadas", len(canal.historial))
    corrida = ResultadoCorrida(
        reporte=reporte,
        registros=tuple(conservados),
        esquemas=esquemas,
        label_space=label_space,
        modelos={n: nuevos[n].modelo for n in nombres},
    )
    return corrida, canal


def run_multi_site(config: ExperimentConfig) -> DistillationReport:
    return ejecutar_multi_sitio(config)[0].reporte
