// End-to-end miniature: synthesize a grounding corpus, train with the moment
// codebook for a handful of epochs, and print the validation report. Runs in
// a few seconds; useful as a smoke test and as a template for scripting the
// library without the CLI.

#include "mqvtg/trainer.hpp"

#include <iostream>

using namespace mqvtg;

int main() {
    SyntheticSpec spec;
    spec.num_videos = 40;
    spec.T = 16;
    spec.P = 2;
    spec.d = 32;
    spec.num_prototypes = 4;
    spec.seed = 11;
    Dataset ds = generate_synthetic(spec);

    TrainConfig cfg;
    cfg.model.d = spec.d;
    cfg.model.K = 32;
    cfg.model.placement = Placement::moment;
    cfg.model.fusion = Fusion::soft;
    cfg.codebook_init = CodebookInit::kmeans;
    cfg.epochs = 6;
    cfg.batch_size = 8;
    cfg.seed = 3;

    TrainResult res = train(cfg, ds, &std::cout);
    std::cout << "best epoch " << res.best_epoch << "\n";

    EvalOutputs ev = evaluate(res.model, ds.val, cfg);
    std::cout << ev.report.to_json().dump(2) << "\n";
    return 0;
}
