from __future__ import annotations

import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Iterator, Mapping, Sequence, TypeVar

import numpy as np
import pandas as pd

from infra.config import ExperimentConfig, ParticipanteConfig
from infra.loader_datos import cargar_esquema, leer_csv
from infra.logger import get_logger
from infra.serializacion import deserialize
from logic.aprendices import fit, fit_arrays, predict_label
from logic.destilacion import (
    ErrorMascara,
    dedup_set_cover,
    derive_mask,
    generate_counterfactual,
    identify_expertise,
    make_target,
    mechanism_report,
    ordenar_registros,
    teaching_sets,
)
from logic.espacio import ErrorEsquema, build_schema, encode_table, feature_names, ordenar_clases, project_matrix
from logic.modelos import (
    ClaveRegistro,
    CounterfactualRecord,
    Dataset,
    DatasetSchema,
    DistillationReport,
    ExpertiseSet,
    FeatureMask,
    LabelSpace,
    Participante,
    TeachingSet,
    TrainedModel,
)
from logic.optimizacion import lambda_search


log = get_logger("orquestacion")

T = TypeVar("T")
R = TypeVar("R")

# Flujos independientes de la semilla del experimento
_FLUJO_GENERACION = 0
_FLUJO_MEZCLA = 1


class ErrorEtapa(RuntimeError):
    """Falla dentro del pipeline, con la etapa y el contexto (maestro, alumno, instancia)."""

    def __init__(
        self,
        etapa: str,
        causa: BaseException,
        maestro: str | None = None,
        alumno: str | None = None,
        instancia: tuple[str, int] | None = None,
    ):
        self.etapa = etapa
        self.causa = causa
        self.maestro = maestro
        self.alumno = alumno
        self.instancia = instancia
        contexto = []
        if maestro is not None:
            contexto.append(f"maestro={maestro}")
        if alumno is not None:
            contexto.append(f"alumno={alumno}")
        if instancia is not None:
            contexto.append(f"instancia={instancia[0]}[{instancia[1]}]")
        sufijo = f" ({', '.join(contexto)})" if contexto else ""
        super().__init__(f"Etapa '{etapa}'{sufijo}: {type(causa).__name__}: {causa}")


@contextmanager
def etapa(nombre: str, tiempos: dict[str, float] | None = None, **contexto: Any) -> Iterator[None]:
    inicio = time.perf_counter()
    try:
        yield
    except (ErrorEtapa, ErrorEsquema):
        raise
    except Exception as e:
        raise ErrorEtapa(nombre, e, **contexto) from e
    finally:
        if tiempos is not None:
            tiempos[nombre] = tiempos.get(nombre, 0.0) + time.perf_counter() - inicio


def mapear(funcion: Callable[[T], R], items: Sequence[T], hilos: int) -> list[R]:
    """map que respeta el orden de entrada; con hilos > 1 usa un pool de threads."""
    if hilos <= 1 or len(items) <= 1:
        return [funcion(x) for x in items]
    with ThreadPoolExecutor(max_workers=hilos) as pool:
        return list(pool.map(funcion, items))


# ==========================================================
# Participantes
# ==========================================================
@dataclass(frozen=True, eq=False)
class Miembro:
    """Un participante ya cargado: sus datos privados y su modelo base."""
    posicion: int
    dataset: Dataset
    participante: Participante

    @property
    def nombre(self) -> str:
        return self.participante.nombre


def leer_participante(pcfg: ParticipanteConfig, config: ExperimentConfig) -> tuple[pd.DataFrame, DatasetSchema]:
    tabla = leer_csv(pcfg.datos)
    if pcfg.esquema is not None:
        esquema = cargar_esquema(pcfg.esquema)
        if esquema.columna_clase != config.columna_clase:
            raise ErrorEsquema(
                f"Participante '{pcfg.nombre}': el esquema usa la columna de clase "
                f"'{esquema.columna_clase}' y el experimento '{config.columna_clase}'"
            )
    else:
        esquema = build_schema(
            tabla,
            config.columna_clase,
            tipos={c: "categorical" for c in pcfg.categoricas},
            max_fraccion_faltantes=config.max_fraccion_faltantes,
        )
    return tabla, esquema


def espacio_etiquetas(esquemas: Iterable[DatasetSchema]) -> LabelSpace:
    """Unión ordenada de las clases de todos los participantes."""
    return LabelSpace(ordenar_clases(c for e in esquemas for c in e.clases))


def derivar_mascaras(dataset: Dataset, fraccion: float | None) -> dict[int, FeatureMask]:
    if fraccion is None:
        return {}
    mascaras: dict[int, FeatureMask] = {}
    for clase in range(dataset.label_space.n):
        try:
            mascaras[clase] = derive_mask(dataset, clase, fraccion)
        except ErrorMascara as e:
            log.info("%s: sin máscara para la clase '%s' (%s)", dataset.nombre, dataset.label_space.classes[clase], e)
    return mascaras


def modelo_base(pcfg: ParticipanteConfig, dataset: Dataset) -> TrainedModel:
    if pcfg.modelo is not None:
        return fit(pcfg.modelo, dataset)
    with open(pcfg.modelo_archivo, "rb") as f:
        modelo = deserialize(f.read())
    if modelo.dimension != dataset.schema.dimension:
        raise ErrorEsquema(
            f"Participante '{pcfg.nombre}': el modelo espera dimensión {modelo.dimension} "
            f"y el esquema tiene {dataset.schema.dimension}"
        )
    if modelo.label_space != dataset.label_space:
        raise ErrorEsquema(
            f"Participante '{pcfg.nombre}': el modelo usa las clases {list(modelo.label_space.classes)} "
            f"y el experimento {list(dataset.label_space.classes)}"
        )
    return modelo


def preparar_miembro(
    posicion: int,
    pcfg: ParticipanteConfig,
    tabla: pd.DataFrame,
    esquema: DatasetSchema,
    label_space: LabelSpace,
    config: ExperimentConfig,
) -> Miembro:
    dataset = encode_table(esquema, tabla, label_space, nombre=pcfg.nombre)
    if len(dataset) == 0:
        raise ErrorEsquema(f"Participante '{pcfg.nombre}' sin instancias")
    modelo = modelo_base(pcfg, dataset)
    mascaras = derivar_mascaras(dataset, config.fraccion_mascara)
    return Miembro(posicion, dataset, Participante(pcfg.nombre, modelo, esquema, mascaras))


# ==========================================================
# Identificacion y lotes de generacion
# ==========================================================
def experticia(participante: Participante, datasets: Mapping[str, Dataset]) -> ExpertiseSet:
    """S_i sobre los datasets proyectables al esquema del participante."""
    correctas: set[tuple[str, int]] = set()
    for d_id, ds in datasets.items():
        try:
            correctas |= identify_expertise(participante, {d_id: ds}).indices
        except ErrorEsquema:
            log.warning("'%s' no puede evaluar '%s': esquemas disjuntos", participante.nombre, d_id)
    return ExpertiseSet(participante.nombre, frozenset(correctas))


@dataclass(frozen=True)
class Lote:
    """Instancias de un dataset que el maestro enseña al alumno."""
    maestro: str
    alumno: str
    dataset: str
    indices: tuple[int, ...]


def planificar_lotes(conjuntos: Iterable[TeachingSet], orden: Sequence[str]) -> list[Lote]:
    """Parte cada R_{i->j} por dataset de origen, en orden canónico de configuración."""
    pos = {n: k for k, n in enumerate(orden)}
    lotes = []
    for ts in conjuntos:
        por_dataset: dict[str, list[int]] = defaultdict(list)
        for d_id, idx in ts.indices:
            por_dataset[d_id].append(idx)
        for d_id, indices in por_dataset.items():
            lotes.append(Lote(ts.maestro, ts.alumno, d_id, tuple(sorted(indices))))
    return sorted(lotes, key=lambda l: (pos[l.maestro], pos[l.alumno], pos[l.dataset]))


@dataclass(frozen=True, eq=False)
class ResultadoLote:
    lote: Lote
    registros: tuple[CounterfactualRecord, ...] = ()   # ya en el esquema del alumno
    lam: float | None = None
    generados: int = 0
    convergidos: int = 0
    fallidos: int = 0
    sin_cambio: int = 0


def huella(fila: np.ndarray) -> bytes:
    """Bytes float64 little-endian de una fila (con -0.0 normalizado)."""
    return (np.ascontiguousarray(fila, dtype="<f8") + 0.0).tobytes()


def huellas(X: np.ndarray) -> set[bytes]:
    return {huella(fila) for fila in np.atleast_2d(X)}


def semilla_instancia(config: ExperimentConfig, orden: Sequence[str], clave: ClaveRegistro) -> int:
    pos = {n: k for k, n in enumerate(orden)}
    sec = np.random.SeedSequence(
        [config.semilla, _FLUJO_GENERACION, pos[clave.maestro], pos[clave.alumno], pos[clave.dataset], clave.indice]
    )
    return int(sec.generate_state(1)[0])


def escalar_lambda(
    intentar: Callable[[float], CounterfactualRecord | None],
    lam: float,
    factor: float,
    tope: float,
) -> CounterfactualRecord | None:
    """Genera con `lam` y, mientras no converja, reintenta multiplicando por `factor` hasta `tope`.

    Devuelve el primer registro convergido o, si ninguno converge, el de menor ajuste.
    """
    r = intentar(lam)
    while (r is None or not r.convergio) and lam * factor <= tope * (1 + 1e-12):
        lam *= factor
        otro = intentar(lam)
        if otro is not None and (r is None or otro.convergio or otro.ajuste < r.ajuste):
            r = otro
    return r


def generar_lote(
    lote: Lote,
    maestro: Participante,
    alumno: Participante,
    dataset: Dataset,
    config: ExperimentConfig,
    orden: Sequence[str],
) -> ResultadoLote:
    """Busca lambda y genera los contrafactuales de un lote; los devuelve proyectados al alumno."""
    try:
        project_matrix(maestro.esquema, alumno.esquema, np.zeros((1, maestro.esquema.dimension)))
        Xm = project_matrix(dataset.schema, maestro.esquema, dataset.X[list(lote.indices)])
        en_alumno = project_matrix(dataset.schema, alumno.esquema, dataset.X)
    except ErrorEsquema as e:
        log.warning("Par %s -> %s omitido para '%s': %s", lote.maestro, lote.alumno, lote.dataset, e)
        return ResultadoLote(lote)
    privadas = huellas(en_alumno)
    origen_alumno = en_alumno[list(lote.indices)]

    def uno(k: int, lam: float) -> CounterfactualRecord | None:
        idx = lote.indices[k]
        clave = ClaveRegistro(lote.maestro, lote.alumno, lote.dataset, idx)
        with etapa("generacion", maestro=lote.maestro, alumno=lote.alumno, instancia=(lote.dataset, idx)):
            y = int(dataset.y[idx])
            target = make_target(maestro.modelo, Xm[k], y, config.alfa)
            budget = replace(config.presupuesto, semilla=semilla_instancia(config, orden, clave))
            return generate_counterfactual(
                maestro.modelo, Xm[k], target, lam, maestro.mascaras.get(y), budget, clave, config.eps_fit,
            )

    politica = config.lambda_
    if politica.politica == "fija":
        lam = politica.valor
    else:
        sondas = range(min(politica.sondas, len(lote.indices)))

        def converge(lam: float) -> bool:
            for k in sondas:
                r = uno(k, lam)
                if r is None or not r.convergio:
                    return False
            return True

        lam = lambda_search(converge, politica.inicio, politica.factor, politica.tope).valor

    registros: list[CounterfactualRecord] = []
    fallidos = sin_cambio = convergidos = 0
    for k, idx in enumerate(lote.indices):
        if politica.politica == "fija":
            r = uno(k, lam)
        else:
            # las instancias que no convergen con el lambda del lote suben el suyo
            r = escalar_lambda(lambda valor, k=k: uno(k, valor), lam, politica.factor, politica.tope)
        if r is None:
            fallidos += 1
            continue
        x_prima = project_matrix(maestro.esquema, alumno.esquema, r.x_prima[None, :])[0]
        # una fila privada (propia o de otra instancia) nunca sale como virtual
        if r.distancia == 0.0 or huella(x_prima) in privadas:
            sin_cambio += 1
            continue
        convergidos += r.convergio
        registros.append(replace(r, x_prima=x_prima, x_origen=origen_alumno[k]))
    if sin_cambio:
        log.info("%s -> %s (%s): %d instancias sin modificar descartadas", lote.maestro, lote.alumno, lote.dataset, sin_cambio)
    return ResultadoLote(lote, tuple(registros), lam, len(registros), convergidos, fallidos, sin_cambio)


def generar_lotes(
    lotes: Sequence[Lote],
    participantes: Mapping[str, Participante],
    datasets: Mapping[str, Dataset],
    config: ExperimentConfig,
) -> list[ResultadoLote]:
    orden = config.nombres

    def tarea(lote: Lote) -> ResultadoLote:
        return generar_lote(
            lote, participantes[lote.maestro], participantes[lote.alumno], datasets[lote.dataset], config, orden,
        )

    return mapear(tarea, lotes, config.hilos)


def candidatos(registros: Iterable[CounterfactualRecord], config: ExperimentConfig) -> list[CounterfactualRecord]:
    """Registros aptos para aumentar: convergidos, o todos si así se configuró."""
    return [r for r in registros if r.convergio or config.incluir_no_convergidos]


# ==========================================================
# Seleccion, aumento y reentrenamiento
# ==========================================================
def radio_cobertura(config: ExperimentConfig, esquema: DatasetSchema) -> float:
    if config.radio_dedup is not None:
        return config.radio_dedup
    return config.factor_cobertura * esquema.dimension


def seleccionar_para_alumno(
    registros: Iterable[CounterfactualRecord],
    esquema: DatasetSchema,
    config: ExperimentConfig,
) -> list[CounterfactualRecord]:
    """Orden canónico y, si está activa, deduplicación por cobertura geométrica."""
    nombres = config.nombres
    ordenados = ordenar_registros(registros, nombres, nombres)
    if not config.dedup_activo or not ordenados:
        return ordenados
    kept = dedup_set_cover(ordenados, radio_cobertura(config, esquema))
    log.info("Dedup: %d de %d registros conservados", len(kept), len(ordenados))
    return kept


def reentrenar(miembro: Miembro, registros: Sequence[CounterfactualRecord], config: ExperimentConfig) -> TrainedModel:
    """Reentrena desde cero sobre datos originales + contrafactuales mezclados."""
    ds = miembro.dataset
    spec = miembro.participante.modelo.spec
    if not registros:
        return fit_arrays(spec, ds.X, ds.y, ds.label_space)
    X = np.vstack([ds.X, np.array([r.x_prima for r in registros])])
    y = np.concatenate([ds.y, np.array([r.etiqueta for r in registros], dtype=int)])
    rng = np.random.default_rng(np.random.SeedSequence([config.semilla, _FLUJO_MEZCLA, miembro.posicion]))
    perm = rng.permutation(len(y))
    return fit_arrays(spec, X[perm], y[perm], ds.label_space)


def matriz_conteos(registros: Iterable[CounterfactualRecord], nombres: Sequence[str]) -> np.ndarray:
    pos = {n: k for k, n in enumerate(nombres)}
    conteos = np.zeros((len(nombres), len(nombres)), dtype=int)
    for r in registros:
        conteos[pos[r.alumno], pos[r.maestro]] += 1
    return conteos


def exactitud(modelo: TrainedModel, esquema: DatasetSchema, prueba: pd.DataFrame, label_space: LabelSpace) -> float:
    ds = encode_table(esquema, prueba, label_space, nombre="prueba")
    if len(ds) == 0:
        raise ErrorEsquema("El conjunto de prueba no tiene instancias con clase")
    return float(np.mean(predict_label(modelo, ds.X) == ds.y))


def entrenar_agrupado(
    miembro: Miembro, todos: Sequence[Dataset], config: ExperimentConfig
) -> TrainedModel:
    """Línea base ideal: el modelo entrenado sobre la unión de todos los datos."""
    bloques_X, bloques_y = [], []
    for ds in todos:
        try:
            bloques_X.append(project_matrix(ds.schema, miembro.participante.esquema, ds.X))
            bloques_y.append(ds.y)
        except ErrorEsquema:
            log.warning("Agrupada: '%s' no se proyecta al esquema de '%s'", ds.nombre, miembro.nombre)
    return fit_arrays(
        miembro.participante.modelo.spec, np.vstack(bloques_X), np.concatenate(bloques_y), miembro.dataset.label_space,
    )


# ==========================================================
# Corrida con datos compartidos
# ==========================================================
@dataclass(frozen=True, eq=False)
class ResultadoCorrida:
    reporte: DistillationReport
    registros: tuple[CounterfactualRecord, ...]     # conservados, en orden canónico
    esquemas: Mapping[str, DatasetSchema]
    label_space: LabelSpace
    modelos: Mapping[str, TrainedModel] = field(default_factory=dict)   # reentrenados


def cargar_miembros(config: ExperimentConfig, tiempos: dict[str, float]) -> tuple[list[Miembro], pd.DataFrame]:
    """Lee datos, esquemas y modelos base. Los errores de validación no se envuelven."""
    inicio = time.perf_counter()
    leidos = [leer_participante(p, config) for p in config.participantes]
    label_space = espacio_etiquetas(e for _, e in leidos)
    prueba = leer_csv(config.prueba)
    tiempos["carga"] = time.perf_counter() - inicio

    with etapa("linea_base", tiempos):
        miembros = mapear(
            lambda k: preparar_miembro(k, config.participantes[k], *leidos[k], label_space, config),
            list(range(len(leidos))),
            config.hilos,
        )
    for m in miembros:
        log.info("%s: %d instancias, dimensión %d, %s", m.nombre, len(m.dataset),
                 m.participante.esquema.dimension, m.participante.modelo.spec.tipo)
    return miembros, prueba


def tasa(convergidos: int, generados: int) -> float:
    return convergidos / generados if generados else 1.0


def ejecutar_destilacion(config: ExperimentConfig) -> ResultadoCorrida:
    """Identificar, generar, aumentar, reentrenar y evaluar, con todos los datos en un proceso."""
    tiempos: dict[str, float] = {}
    miembros, prueba = cargar_miembros(config, tiempos)
    nombres = config.nombres
    label_space = miembros[0].dataset.label_space
    participantes = {m.nombre: m.participante for m in miembros}
    datasets = {m.nombre: m.dataset for m in miembros}

    with etapa("identificacion", tiempos):
        expertise = mapear(lambda m: experticia(m.participante, datasets), miembros, config.hilos)
        conjuntos = teaching_sets(expertise)
        lotes = planificar_lotes(conjuntos, nombres)
    log.info("%d conjuntos de enseñanza, %d instancias a enseñar",
             len(conjuntos), sum(len(l.indices) for l in lotes))

    with etapa("generacion", tiempos):
        resultados = generar_lotes(lotes, participantes, datasets, config)
    generados = sum(r.generados for r in resultados)
    convergidos = sum(r.convergidos for r in resultados)
    log.info("%d contrafactuales generados, %d convergidos", generados, convergidos)

    with etapa("seleccion", tiempos):
        aptos = candidatos((r for res in resultados for r in res.registros), config)
        deltas = mechanism_report(aptos, label_space.classes, nombres) if aptos else ()
        por_alumno: dict[str, list[CounterfactualRecord]] = defaultdict(list)
        for r in aptos:
            por_alumno[r.alumno].append(r)
        seleccion = {
            m.nombre: seleccionar_para_alumno(por_alumno[m.nombre], m.participante.esquema, config) for m in miembros
        }

    with etapa("reentrenamiento", tiempos):
        nuevos = mapear(lambda m: reentrenar(m, seleccion[m.nombre], config), miembros, config.hilos)

    with etapa("evaluacion", tiempos):
        antes = {m.nombre: exactitud(m.participante.modelo, m.participante.esquema, prueba, label_space) for m in miembros}
        despues = {m.nombre: exactitud(f, m.participante.esquema, prueba, label_space) for m, f in zip(miembros, nuevos)}

    agrupada = None
    if config.linea_base_agrupada:
        with etapa("agrupada", tiempos):
            todos = [m.dataset for m in miembros]
            agrupada = {
                m.nombre: exactitud(entrenar_agrupado(m, todos, config), m.participante.esquema, prueba, label_space)
                for m in miembros
            }

    conservados = [r for n in nombres for r in seleccion[n]]
    reporte = DistillationReport(
        modelos=nombres,
        exactitud_antes=antes,
        exactitud_despues=despues,
        conteos=matriz_conteos(conservados, nombres),
        deltas=tuple(deltas),
        atributos={m.nombre: feature_names(m.participante.esquema) for m in miembros},
        tasa_convergencia=tasa(convergidos, generados),
        generados=generados,
        lambdas={(r.lote.maestro, r.lote.alumno, r.lote.dataset): r.lam for r in resultados if r.lam is not None},
        exactitud_agrupada=agrupada,
        tiempos=tiempos,
    )
    for n in nombres:
        log.info("%s: exactitud %.4f -> %.4f (%d instancias destiladas)", n, antes[n], despues[n], reporte.recibidos(n))
    return ResultadoCorrida(
        reporte=reporte,
        registros=tuple(ordenar_registros(conservados, nombres, nombres)),
        esquemas={m.nombre: m.participante.esquema for m in miembros},
        label_space=label_space,
        modelos=dict(zip(nombres, nuevos)),
    )


def run_distillation(config: ExperimentConfig) -> DistillationReport:
    return ejecutar_destilacion(config).reporte
