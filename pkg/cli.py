"""Punto de entrada de línea de comandos (`codist`)."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from infra.config import ExperimentConfig, load_config, load_experimento
from infra.escenarios import (
    ESCENARIOS,
    escribir_escenario,
    mezcla_gaussiana,
    random_feature_drop,
    separar_prueba,
    undersample_split,
)
from infra.export import (
    escribir_atomico,
    escribir_manifiesto,
    escribir_reporte,
    leer_reporte,
    reporte_a_excel_bytes,
    tabla_registros,
)
from infra.loader_datos import cargar_esquema, cargar_spec_modelo, esquema_a_yaml, leer_csv
from infra.logger import get_logger, set_nivel
from infra.serializacion import serialize
from logic.aprendices import fit, predict_label
from logic.espacio import ErrorEsquema, build_schema, como_categoria, encode_table, ordenar_clases
from logic.modelos import LabelSpace
from logic.orquestacion import ErrorEtapa, ResultadoCorrida, ejecutar_destilacion
from logic.sitios import ViolacionPrivacidad, ejecutar_multi_sitio


log = get_logger("cli")

EXITO = 0
ERROR_VALIDACION = 2
ERROR_EJECUCION = 3


# ==========================================================
# Comandos
# ==========================================================
def cmd_train(args: argparse.Namespace) -> int:
    tabla = leer_csv(args.data)
    schema = cargar_esquema(args.schema)
    if schema.columna_clase not in tabla.columns:
        raise ErrorEsquema(f"La columna de clase '{schema.columna_clase}' no está en {args.data}")
    faltan = [c.nombre for c in schema.columnas if c.nombre not in tabla.columns]
    if faltan:
        raise ErrorEsquema(f"Columnas del esquema ausentes en {args.data}: {faltan}")

    spec = cargar_spec_modelo(args.model)
    if args.seed is not None:
        spec = replace(spec, semilla=args.seed)
    clases = schema.clases or ordenar_clases(
        c for c in tabla[schema.columna_clase].map(como_categoria) if c is not None
    )
    label_space = LabelSpace(clases)

    if args.validation_fraction > 0:
        entrenamiento, validacion = separar_prueba(
            tabla, schema.columna_clase, args.validation_fraction, args.seed or 0
        )
    else:
        entrenamiento, validacion = tabla, None
    ds = encode_table(schema, entrenamiento, label_space, nombre=Path(args.data).stem)
    modelo = fit(spec, ds)
    escribir_atomico(args.out, serialize(modelo))

    print(f"Exactitud de entrenamiento: {np.mean(predict_label(modelo, ds.X) == ds.y):.4f}")
    if validacion is not None and len(validacion):
        dv = encode_table(schema, validacion, label_space, nombre="validacion")
        print(f"Exactitud de validación: {np.mean(predict_label(modelo, dv.X) == dv.y):.4f}")
    print(f"Modelo guardado en {args.out}")
    return EXITO


def _manifiesto(config: ExperimentConfig, corrida: ResultadoCorrida) -> dict[str, Any]:
    cfg = load_config()
    reporte = corrida.reporte
    return {
        "herramienta": {"nombre": cfg.app.nombre, "version": cfg.app.version},
        "semillas": {
            "experimento": config.semilla,
            "modelos": {n: m.spec.semilla for n, m in corrida.modelos.items()},
        },
        "tiempos": {k: round(v, 6) for k, v in reporte.tiempos.items()},
        "resumen": {
            "generados": reporte.generados,
            "tasa_convergencia": float(reporte.tasa_convergencia),
            "recibidos": {n: reporte.recibidos(n) for n in reporte.modelos},
            "lambdas": [
                {"maestro": m, "alumno": a, "dataset": d, "valor": float(v)}
                for (m, a, d), v in reporte.lambdas.items()
            ],
        },
        "configuracion": config.como_dict(),
    }


def cmd_distill(args: argparse.Namespace) -> int:
    config = load_experimento(args.config, semilla=args.seed, hilos=args.threads)
    if args.out is not None:
        config = replace(config, salida=Path(args.out).resolve())

    log.info("Destilación en modo %s con %d participantes", config.modo, len(config.participantes))
    if config.modo == "multi-site":
        corrida, _ = ejecutar_multi_sitio(config)
    else:
        corrida = ejecutar_destilacion(config)

    formato = load_config().app.formato_float
    volcado = tabla_registros(corrida.registros, corrida.esquemas, corrida.label_space)
    escritos = escribir_reporte(corrida.reporte, config.salida, formato, volcado)
    escritos.append(escribir_manifiesto(config.salida, _manifiesto(config, corrida)))
    print(f"Reporte en {config.salida} ({len(escritos)} archivos)")
    return EXITO


def cmd_make_scenario(args: argparse.Namespace) -> int:
    if (args.input is None) == (args.synthetic is None):
        raise ValueError("Indicar exactamente uno de --input o --synthetic")
    semilla = args.seed or 0
    if args.synthetic is not None:
        base = mezcla_gaussiana(args.n, args.dim, args.classes, args.separation, semilla, args.class_column)
    else:
        base = leer_csv(args.input)

    modelo = {"tipo": "mlp"}
    if args.model is not None:
        modelo = cargar_spec_modelo(args.model).como_dict()
    extras: dict[str, Any] = {"semilla": semilla}

    if args.kind == "undersample-split":
        if args.test is not None:
            entrenamiento, prueba = base, leer_csv(args.test)
        else:
            entrenamiento, prueba = separar_prueba(base, args.class_column, args.test_fraction, semilla)
        partes = undersample_split(entrenamiento, args.class_column, args.k, args.rate, semilla)
        nombres = {f"sitio_{p}": df for p, df in enumerate(partes)}
        extras.update({"dedup": {"activo": True, "radio": "auto"}, "linea_base_agrupada": True})
    else:
        a, b, prueba = random_feature_drop(base, args.class_column, args.shared, semilla=semilla)
        if args.test is not None:
            prueba = leer_csv(args.test)
        nombres = {"sitio_a": a, "sitio_b": b}

    destino = escribir_escenario(args.out, nombres, prueba, args.class_column, modelo, args.categorical, extras)
    print(f"Escenario '{args.kind}' escrito en {args.out}; experimento: {destino}")
    return EXITO


def cmd_report(args: argparse.Namespace) -> int:
    tablas = leer_reporte(args.directory)
    for nombre, df in tablas.items():
        print(f"== {nombre} ==")
        print(df.to_string(index=False))
        print()
    manifiesto = Path(args.directory) / "manifest.yaml"
    if manifiesto.is_file():
        with open(manifiesto, "r", encoding="utf-8") as f:
            resumen = (yaml.safe_load(f) or {}).get("resumen", {})
        print(f"Contrafactuales generados: {resumen.get('generados')}")
        print(f"Tasa de convergencia: {resumen.get('tasa_convergencia')}")
    if args.excel is not None:
        escribir_atomico(args.excel, reporte_a_excel_bytes(tablas))
        print(f"Excel escrito en {args.excel}")
    return EXITO


def cmd_schema(args: argparse.Namespace) -> int:
    tabla = leer_csv(args.data)
    schema = build_schema(
        tabla,
        args.class_column,
        tipos={c: "categorical" for c in args.categorical},
        max_fraccion_faltantes=args.max_missing,
    )
    escribir_atomico(args.out, esquema_a_yaml(schema))
    print(f"Esquema de {len(schema.columnas)} columnas (dimensión {schema.dimension}) en {args.out}")
    return EXITO


# ==========================================================
# Parser
# ==========================================================
def construir_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="codist", description="Destilación cooperativa de conocimiento.")
    parser.add_argument("--seed", type=int, default=None, help="semilla global (pisa la del experimento)")
    parser.add_argument("--threads", type=int, default=None, help="hilos para generación y reentrenamiento")
    parser.add_argument("--quiet", action="store_true", help="solo advertencias y errores")
    sub = parser.add_subparsers(dest="comando", required=True)

    p = sub.add_parser("train", help="entrena un modelo y lo guarda en formato CODIST1")
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--model", required=True, help="YAML con la spec del modelo")
    p.add_argument("--out", required=True)
    p.add_argument("--validation-fraction", type=float, default=0.2)
    p.set_defaults(funcion=cmd_train)

    p = sub.add_parser("distill", help="corre un experimento de destilación")
    p.add_argument("config", help="experimento YAML o manifiesto de una corrida anterior")
    p.add_argument("--out", default=None, help="directorio del reporte (pisa 'salida')")
    p.set_defaults(funcion=cmd_distill)

    p = sub.add_parser("make-scenario", help="genera participantes y un experimento listo para correr")
    p.add_argument("kind", choices=ESCENARIOS)
    p.add_argument("--out", required=True)
    p.add_argument("--input", default=None, help="CSV base")
    p.add_argument("--synthetic", choices=("gaussian",), default=None)
    p.add_argument("--class-column", default="clase")
    p.add_argument("--n", type=int, default=1200)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--separation", type=float, default=1.5)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--rate", type=float, default=0.95)
    p.add_argument("--shared", type=int, default=2)
    p.add_argument("--test", default=None, help="CSV de prueba ya separado")
    p.add_argument("--test-fraction", type=float, default=1 / 3)
    p.add_argument("--model", default=None, help="YAML con la spec de modelo de los participantes")
    p.add_argument("--categorical", nargs="*", default=[])
    p.set_defaults(funcion=cmd_make_scenario)

    p = sub.add_parser("report", help="muestra un reporte existente")
    p.add_argument("directory")
    p.add_argument("--excel", default=None, help="exporta el reporte a un libro Excel")
    p.set_defaults(funcion=cmd_report)

    p = sub.add_parser("schema", help="construye el esquema YAML de un CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--class-column", required=True)
    p.add_argument("--categorical", nargs="*", default=[])
    p.add_argument("--max-missing", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(funcion=cmd_schema)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = construir_parser().parse_args(argv)
    if args.quiet:
        set_nivel(logging.WARNING)
    try:
        return args.funcion(args)
    except (ErrorEtapa, ViolacionPrivacidad) as e:
        print(f"❌ {e}", file=sys.stderr)
        return ERROR_EJECUCION
    except (ValueError, KeyError, FileNotFoundError, IsADirectoryError, yaml.YAMLError) as e:
        print(f"❌ {e}", file=sys.stderr)
        return ERROR_VALIDACION
    except Exception as e:  # noqa: BLE001
        log.exception("Falla inesperada")
        print(f"❌ {type(e).__name__}: {e}", file=sys.stderr)
        return ERROR_EJECUCION


if __name__ == "__main__":
    sys.exit(main())
