#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "fairpda/cohort.hpp"

using namespace fairpda;

namespace {

std::string write_temp(const std::string& name, const std::string& content) {
    const auto path = (std::filesystem::temp_directory_path() / name).string();
    std::ofstream os(path);
    os << content;
    return path;
}

// Builds a synthetic manifest CSV with one recording per patient.
std::string manifest_csv(const std::vector<PatientRecord>& patients) {
    std::ostringstream os;
    os << kManifestHeader << "\n";
    for (const auto& p : patients) {
        std::string codes;
        for (const auto& c : p.exclusion_codes) codes += (codes.empty() ? "" : ";") + c;
        os << p.patient_id << "," << p.dataset_id << "," << to_string(p.class_label) << ","
           << to_string(p.gender) << "," << p.age << "," << codes << ","
           << to_string(p.medication_flag) << "," << p.patient_id << "_r0,"
           << p.patient_id << ".wav\n";
    }
    return os.str();
}

std::vector<PatientRecord> cohort_fixture(size_t n_hc, size_t n_pd,
                                          const std::string& ds = "mpower") {
    std::vector<PatientRecord> out;
    for (size_t i = 0; i < n_hc + n_pd; ++i) {
        PatientRecord p;
        p.patient_id = ds + "_p" + std::to_string(i);
        p.dataset_id = ds;
        p.class_label = i < n_hc ? ClassLabel::HC : ClassLabel::PD;
        p.gender = i % 2 ? Gender::F : Gender::M;
        p.age = 40 + static_cast<int>(i % 35);
        p.medication_flag = MedicationFlag::standard;
        out.push_back(p);
    }
    return out;
}

}  // namespace

TEST_CASE("manifest fixture with Table-1-scale counts parses to the right label space") {
    // 869 HC + 435 PD patients in one dataset
    const auto path = write_temp("fpda_t1.csv", manifest_csv(cohort_fixture(869, 435)));
    const CohortManifest m = load_manifest(path);
    CHECK(m.patients.size() == 1304);
    CHECK(m.recordings.size() == 1304);
    CHECK(m.label_space() == std::set<ClassLabel>({ClassLabel::HC, ClassLabel::PD}));
    std::filesystem::remove(path);
}

TEST_CASE("manifest loader reports the offending line on malformed input") {
    const auto path = write_temp(
        "fpda_bad.csv", std::string(kManifestHeader) + "\np1,ds,HC,M,notanage,,standard,r1,a.wav\n");
    CHECK_THROWS_WITH_AS(load_manifest(path), doctest::Contains(":2:"), ValidationError);
    std::filesystem::remove(path);
}

TEST_CASE("manifest loader rejects a wrong header, duplicates, and dangling recordings") {
    const auto bad_header = write_temp("fpda_h.csv", "wrong,header\n");
    CHECK_THROWS_AS(load_manifest(bad_header), ValidationError);
    std::filesystem::remove(bad_header);

    const auto dup = write_temp("fpda_dup.csv",
                                std::string(kManifestHeader) +
                                    "\np1,ds,HC,M,50,,standard,r1,a.wav\n"
                                    "p1,ds,PD,M,50,,standard,r2,b.wav\n");
    // same patient with inconsistent fields must be rejected
    CHECK_THROWS_AS(load_manifest(dup), ValidationError);
    std::filesystem::remove(dup);

    const auto dupr = write_temp("fpda_dupr.csv",
                                 std::string(kManifestHeader) +
                                     "\np1,ds,HC,M,50,,standard,r1,a.wav\n"
                                     "p1,ds,HC,M,50,,standard,r1,b.wav\n");
    CHECK_THROWS_AS(load_manifest(dupr), ValidationError);
    std::filesystem::remove(dupr);
}

TEST_CASE("manifest save/load round trips") {
    auto patients = cohort_fixture(3, 2);
    patients[0].exclusion_codes = {"stroke", "cleft_palate"};
    const auto path = write_temp("fpda_rt.csv", manifest_csv(patients));
    const CohortManifest m = load_manifest(path);
    const auto path2 = (std::filesystem::temp_directory_path() / "fpda_rt2.csv").string();
    save_manifest(path2, m);
    const CohortManifest m2 = load_manifest(path2);
    CHECK(m2.patients.size() == m.patients.size());
    CHECK(m2.patient(patients[0].patient_id).exclusion_codes ==
          std::set<std::string>({"stroke", "cleft_palate"}));
    std::filesystem::remove(path);
    std::filesystem::remove(path2);
}

TEST_CASE("age and exclusion filters drop the right patients") {
    auto patients = cohort_fixture(4, 4);
    patients[0].age = 20;   // too young
    patients[1].age = 85;   // too old
    patients[2].exclusion_codes = {"stroke"};
    CohortManifest m;
    m.patients = patients;
    for (const auto& p : patients)
        m.recordings.push_back({p.patient_id + "_r0", p.patient_id, p.patient_id + ".wav"});

    FilterConfig f;
    f.excluded_codes = FilterConfig::default_excluded_codes();
    const CohortManifest out = apply_filters(m, f);
    CHECK(out.patients.size() == 5);
    CHECK(out.recordings.size() == 5);
    for (const auto& p : out.patients) {
        CHECK(p.age >= 34);
        CHECK(p.age <= 80);
        CHECK(p.exclusion_codes.count("stroke") == 0);
    }
}

TEST_CASE("filtering everything out is an error, not an empty result") {
    CohortManifest m;
    m.patients = cohort_fixture(2, 0);
    for (auto& p : m.patients) p.age = 20;
    FilterConfig f;
    CHECK_THROWS_AS(apply_filters(m, f), ValidationError);
}

TEST_CASE("10 patients, k=5: each test fold has 2 patients, each patient exactly once") {
    CohortManifest m;
    m.patients = cohort_fixture(5, 5);
    const SplitPlan plan = make_cv_splits(m, 5, 3);
    REQUIRE(plan.cv_folds.size() == 5);
    std::set<std::string> seen;
    for (const auto& f : plan.cv_folds) {
        CHECK(f.test.size() == 2);
        CHECK(f.train.size() == 8);
        for (const auto& id : f.test) CHECK(seen.insert(id).second);
        // no leakage: train and test disjoint
        std::set<std::string> train(f.train.begin(), f.train.end());
        for (const auto& id : f.test) CHECK(train.count(id) == 0);
    }
    CHECK(seen.size() == 10);
}

TEST_CASE("100 patients (50 HC / 50 PD), k=5: every fold is stratified 10+10") {
    CohortManifest m;
    m.patients = cohort_fixture(50, 50);
    const SplitPlan plan = make_cv_splits(m, 5, 11);
    for (const auto& f : plan.cv_folds) {
        size_t hc = 0, pd = 0;
        for (const auto& id : f.test)
            (m.patient(id).class_label == ClassLabel::HC ? hc : pd) += 1;
        CHECK(hc == 10);
        CHECK(pd == 10);
    }
}

TEST_CASE("cv split partition property holds for ragged strata") {
    CohortManifest m;
    m.patients = cohort_fixture(7, 12);
    const SplitPlan plan = make_cv_splits(m, 4, 17);
    std::set<std::string> all_test;
    size_t total = 0;
    for (const auto& f : plan.cv_folds) {
        total += f.test.size();
        for (const auto& id : f.test) all_test.insert(id);
    }
    CHECK(total == m.patients.size());      // pairwise disjoint
    CHECK(all_test.size() == m.patients.size());  // covers everything
}

TEST_CASE("uda split applies the floor(0.3 n) rule (min 1) per target dataset") {
    for (size_t n : {2ul, 3ul, 4ul, 7ul, 10ul, 17ul}) {
        CohortManifest m;
        m.role = CohortRole::target;
        m.patients = cohort_fixture(n, 0, "tgt" + std::to_string(n));
        const SplitPlan plan = make_uda_split(m, 0.3, 7);
        const size_t expect = std::max<size_t>(1, static_cast<size_t>(0.3 * static_cast<double>(n)));
        CHECK(plan.uda_adaptation.size() == expect);
        CHECK(plan.uda_external_eval.size() == n - expect);
        // disjoint and exhaustive
        std::set<std::string> a(plan.uda_adaptation.begin(), plan.uda_adaptation.end());
        for (const auto& id : plan.uda_external_eval) CHECK(a.count(id) == 0);
    }
}

TEST_CASE("uda split requires a target-role manifest and a valid fraction") {
    CohortManifest m;
    m.patients = cohort_fixture(5, 5);
    CHECK_THROWS_AS(make_uda_split(m, 0.3, 1), ValidationError);  // role is source
    m.role = CohortRole::target;
    CHECK_THROWS_AS(make_uda_split(m, 0.0, 1), ValidationError);
    CHECK_THROWS_AS(make_uda_split(m, 1.0, 1), ValidationError);
}

TEST_CASE("split plan JSON round trips with the documented keys") {
    CohortManifest src;
    src.patients = cohort_fixture(6, 6);
    SplitPlan plan = make_cv_splits(src, 3, 5);
    plan.uda_adaptation = {"t1", "t2"};
    plan.uda_external_eval = {"t3"};
    const auto j = plan.to_json();
    CHECK(j.contains("seed"));
    CHECK(j.contains("folds"));
    CHECK(j.contains("uda_adaptation"));
    CHECK(j.contains("uda_external_eval"));
    const SplitPlan back = SplitPlan::from_json(j);
    CHECK(back.seed == plan.seed);
    REQUIRE(back.cv_folds.size() == plan.cv_folds.size());
    for (size_t i = 0; i < back.cv_folds.size(); ++i) {
        CHECK(back.cv_folds[i].train == plan.cv_folds[i].train);
        CHECK(back.cv_folds[i].test == plan.cv_folds[i].test);
    }
    CHECK(back.uda_adaptation == plan.uda_adaptation);
}

TEST_CASE("splits are deterministic in the seed and differ across seeds") {
    CohortManifest m;
    m.patients = cohort_fixture(20, 20);
    const auto a = make_cv_splits(m, 5, 42).to_json();
    const auto b = make_cv_splits(m, 5, 42).to_json();
    const auto c = make_cv_splits(m, 5, 43).to_json();
    CHECK(a == b);
    CHECK(a != c);
}

TEST_CASE("merge_manifests combines datasets and rejects id collisions") {
    CohortManifest a, b;
    a.patients = cohort_fixture(2, 2, "dsA");
    b.patients = cohort_fixture(3, 0, "dsB");
    const CohortManifest merged = merge_manifests({a, b}, CohortRole::source);
    CHECK(merged.patients.size() == 7);
    CHECK(merged.dataset_ids() == std::set<std::string>({"dsA", "dsB"}));
    CHECK_THROWS_AS(merge_manifests({a, a}, CohortRole::source), ValidationError);
}

TEST_CASE("enum parsers reject unknown values") {
    CHECK_THROWS_AS(parse_class_label("XX"), ValidationError);
    CHECK_THROWS_AS(parse_gender("Q"), ValidationError);
    CHECK(parse_class_label("ALS") == ClassLabel::ALS);
    CHECK(parse_medication_flag("missing") == MedicationFlag::missing);
}
