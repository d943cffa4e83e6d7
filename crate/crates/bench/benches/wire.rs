use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion, Throughput};
use fedseg::wire::{decode_frame, encode_frame, Decoder, Message};
use fedseg_bench::preset_unet;

fn update_frame(c: &mut Criterion) {
    let params = preset_unet().build::<f32>(1, 2).unwrap().get_params();
    let msg = Message::Update {
        round_index: 3,
        n_samples: 120,
        params: params.values().to_vec(),
        local_val_dice: 0.9,
    };
    let frame = encode_frame(&msg).unwrap();
    let mut g = c.benchmark_group("update_frame");
    g.throughput(Throughput::Bytes(frame.len() as u64));
    g.bench_function("encode", |b| {
        b.iter(|| encode_frame(black_box(&msg)).unwrap())
    });
    g.bench_function("decode", |b| {
        b.iter(|| decode_frame(black_box(&frame)).unwrap())
    });
    // Arrives in 1500-byte pieces, as off a socket.
    g.bench_function("stream_decode", |b| {
        b.iter(|| {
            let mut dec = Decoder::new();
            for chunk in frame.chunks(1500) {
                dec.push(chunk);
            }
            dec.next_message().unwrap().unwrap()
        })
    });
    g.finish();
}

criterion_group!(benches, update_frame);
criterion_main!(benches);
