// Minimal library usage without the CLI: render one phantom study, score it
// with a freshly initialized desk-scale model, and ensemble the three views.
//
// Build (header-only, no linking):
//   g++ -std=c++20 -O2 -I../include -I/usr/include/eigen3 predict_volume.cpp -o predict_volume
// or use the demo_predict target from the top-level CMake build.

#include <cstdio>

#include "slicewise/calibration.hpp"
#include "slicewise/model.hpp"
#include "slicewise/phantom.hpp"

using namespace slicewise;

int main() {
    PhantomConfig phantom;
    phantom.n_studies = 2;
    phantom.slices = 4;
    phantom.height = 64;
    phantom.width = 64;
    phantom.seed = 9;

    nn::EncoderConfig encoder;
    encoder.architecture = nn::Architecture::SmallConvBaseline;
    encoder.embedding_dim = nn::EncoderConfig::kSmallConvDim;
    encoder.image_size = 64;
    const ScanClassifier model = make_model(encoder, 42);

    for (const PhantomStudyParams& study : plan_phantom_studies(phantom)) {
        std::vector<ScanPrediction> per_series;
        for (View view : phantom.views_per_study) {
            const VolumeScan scan = render_phantom_series(phantom, study, view, 0);
            per_series.push_back(predict_scan(scan, model));
        }
        const EnsemblePrediction ensembled = ensemble_views(per_series);
        std::printf("%s  label=%d  ensemble probability %.4f\n", study.study_id.c_str(),
                    study.label, ensembled.ensemble_probability);
        for (const ScanPrediction& p : per_series)
            std::printf("    %-9s %.4f\n", to_string(p.view).c_str(), p.probability);
    }
    return 0;
}
