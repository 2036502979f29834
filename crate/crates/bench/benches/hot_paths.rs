use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use cotcanvas::backends::scene::{generate_scene, Shape};
use cotcanvas::backends::Backends;
use cotcanvas::cotparse::{format_cot, parse_cot};
use cotcanvas::decompose::{decompose_grammar, ClauseLexicon};
use cotcanvas::pipeline::{run_edit, PipelinePolicy};
use cotcanvas::raster::{mask_iou, outside_mask_identical_ratio, BinaryMask};
use cotcanvas::types::CoTStep;

fn masks(c: &mut Criterion) {
    let a = BinaryMask::rect(512, 512, 40, 40, 300, 260).unwrap();
    let b = BinaryMask::rect(512, 512, 100, 90, 420, 400).unwrap();
    c.bench_function("mask_dilate_r4_512", |bch| bch.iter(|| black_box(&a).dilate(4)));
    c.bench_function("mask_iou_512", |bch| bch.iter(|| mask_iou(black_box(&a), black_box(&b)).unwrap()));
    let scene = generate_scene(1, None).unwrap();
    let fg = scene.foreground();
    c.bench_function("outside_ratio_scene", |bch| {
        bch.iter(|| outside_mask_identical_ratio(&scene.image, black_box(&scene.image), &fg).unwrap())
    });
}

fn codec(c: &mut Criterion) {
    let steps: Vec<CoTStep> = (0..4)
        .map(|i| CoTStep {
            index: i + 1,
            reasoning: "The object sits near the lower left corner of the table, next to a cup.".into(),
            area_description: (i % 2 == 0).then(|| "A round region with a glossy surface.".into()),
            seg_index: i as usize,
            inpaint_prompt: format!("a small potted plant number {i}"),
        })
        .collect();
    let text = format_cot(&steps, Some("We split this into four steps.")).unwrap();
    c.bench_function("format_cot_4", |b| b.iter(|| format_cot(black_box(&steps), None).unwrap()));
    c.bench_function("parse_cot_4", |b| b.iter(|| parse_cot(black_box(&text)).unwrap()));
    let lex = ClauseLexicon::builtin();
    c.bench_function("decompose_grammar_3", |b| {
        b.iter(|| {
            decompose_grammar(
                black_box("remove the red square, turn the blue circle green, and add a hat on the yellow triangle"),
                lex,
            )
            .unwrap()
        })
    });
}

fn pipeline(c: &mut Criterion) {
    let scene =
        generate_scene(3, Some(&[("red", Shape::Square), ("blue", Shape::Circle), ("yellow", Shape::Triangle)])).unwrap();
    let backends = Backends::mock();
    let policy = PipelinePolicy::default();
    let lex = ClauseLexicon::builtin();
    c.bench_function("run_edit_mock_3_steps", |b| {
        b.iter(|| {
            run_edit(
                &scene.image,
                "remove the red square, turn the blue circle green, and add a hat on the yellow triangle",
                &policy,
                &backends,
                lex,
            )
            .unwrap()
        })
    });
}

criterion_group!(benches, masks, codec, pipeline);
criterion_main!(benches);
